use ndarray::Array2;
use std::time::Instant;

fn bench(m: usize, k: usize, n: usize, reps: usize) {
    let a = Array2::<f64>::from_elem((m, k), 0.5);
    let b = Array2::<f64>::from_elem((k, n), 0.25);
    let t0 = Instant::now();
    let mut acc = 0.0;
    for _ in 0..reps {
        let c = a.dot(&b);
        acc += c[[0, 0]];
    }
    let dt = t0.elapsed().as_secs_f64();
    let flops = 2.0 * (m * k * n * reps) as f64;
    println!(
        "{}x{}x{} reps={} -> {:.3}s, {:.2} GFLOP/s (acc {})",
        m, k, n, reps, dt, flops / dt / 1e9, acc
    );
}

fn main() {
    bench(256, 768, 32, 500);
    bench(256, 32, 96, 5000);
    bench(257, 65, 32, 5000);
    bench(65, 64, 192, 5000);
    bench(512, 512, 512, 30);
}
