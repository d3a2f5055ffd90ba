//! Multiscale video encoder: cube patch embedding followed by stages of
//! pooling-attention blocks. Spatial resolution shrinks at stage boundaries
//! while the channel width expands; a class token rides along, is never
//! pooled away, and its final embedding feeds the frame-level heads.
//!
//! Pooling is strided average pooling over the token grid (window = stride),
//! applied to queries/keys/values after their projections; the residual path
//! pools the block input with the query stride so shapes line up.

use crate::{Result, TapirError};
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use tapir_autograd::params::{Init, ParamStore, Session};
use tapir_autograd::Var;

pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub blocks: usize,
    pub heads: usize,
    /// Query pooling stride, applied in the stage's first block only.
    pub q_stride: (usize, usize, usize),
    /// Key/value pooling stride, applied in every block of the stage.
    pub kv_stride: (usize, usize, usize),
    /// Channel expansion entering this stage (1 for the first stage).
    pub channel_mult: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Cube patch size (t, h, w).
    pub patch: (usize, usize, usize),
    /// Embedding width after patch projection.
    pub c0: usize,
    pub clip_t: usize,
    pub image_size: (usize, usize),
    pub stages: Vec<StageConfig>,
    pub mlp_ratio: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        // Desk-scale default: two stages of two blocks, 32→64 channels.
        Self {
            patch: (2, 8, 8),
            c0: 32,
            clip_t: 16,
            image_size: (64, 64),
            stages: vec![
                StageConfig {
                    blocks: 2,
                    heads: 2,
                    q_stride: (1, 1, 1),
                    kv_stride: (1, 4, 4),
                    channel_mult: 1,
                },
                StageConfig {
                    blocks: 2,
                    heads: 4,
                    q_stride: (1, 2, 2),
                    kv_stride: (1, 2, 2),
                    channel_mult: 2,
                },
            ],
            mlp_ratio: 2,
            dropout: 0.0,
        }
    }
}

/// Per-stage output geometry: grid (t, h, w) and channel width.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageShape {
    pub grid: (usize, usize, usize),
    pub channels: usize,
}

impl EncoderConfig {
    /// A minimal configuration for gradient checks and shape tests.
    pub fn tiny() -> Self {
        Self {
            patch: (2, 4, 4),
            c0: 8,
            clip_t: 4,
            image_size: (8, 8),
            stages: vec![
                StageConfig {
                    blocks: 1,
                    heads: 2,
                    q_stride: (1, 1, 1),
                    kv_stride: (1, 2, 2),
                    channel_mult: 1,
                },
                StageConfig {
                    blocks: 1,
                    heads: 2,
                    q_stride: (2, 1, 1),
                    kv_stride: (1, 1, 1),
                    channel_mult: 2,
                },
            ],
            mlp_ratio: 2,
            dropout: 0.0,
        }
    }

    /// Closed-form shape ledger: geometry after the embed step and after
    /// every stage. Errors on any indivisible stride or zero dimension.
    pub fn stage_shapes(&self) -> Result<Vec<StageShape>> {
        let (pt, ph, pw) = self.patch;
        let (ih, iw) = self.image_size;
        if pt == 0 || ph == 0 || pw == 0 || self.clip_t % pt != 0 || ih % ph != 0 || iw % pw != 0 {
            return Err(TapirError::Shape {
                expected: format!("clip {}×{}×{} divisible by patch {:?}", self.clip_t, ih, iw, self.patch),
                got: "indivisible patching".into(),
            });
        }
        let mut grid = (self.clip_t / pt, ih / ph, iw / pw);
        let mut channels = self.c0;
        let mut out = vec![StageShape { grid, channels }];
        for (si, stage) in self.stages.iter().enumerate() {
            channels *= stage.channel_mult;
            if channels % stage.heads != 0 {
                return Err(TapirError::Shape {
                    expected: format!("stage {si}: channels {channels} divisible by heads {}", stage.heads),
                    got: "indivisible heads".into(),
                });
            }
            let q = stage.q_stride;
            if grid.0 % q.0 != 0 || grid.1 % q.1 != 0 || grid.2 % q.2 != 0 {
                return Err(TapirError::Shape {
                    expected: format!("stage {si}: grid {grid:?} divisible by query stride {q:?}"),
                    got: "indivisible query stride".into(),
                });
            }
            grid = (grid.0 / q.0, grid.1 / q.1, grid.2 / q.2);
            let kv = stage.kv_stride;
            let pooled_grid = grid; // kv pooling applies after q pooling in block 1+
            if pooled_grid.0 % kv.0 != 0 || pooled_grid.1 % kv.1 != 0 || pooled_grid.2 % kv.2 != 0 {
                return Err(TapirError::Shape {
                    expected: format!("stage {si}: grid {pooled_grid:?} divisible by kv stride {kv:?}"),
                    got: "indivisible kv stride".into(),
                });
            }
            if grid.0 == 0 || grid.1 == 0 || grid.2 == 0 {
                return Err(TapirError::Shape {
                    expected: format!("stage {si}: nonzero grid"),
                    got: format!("{grid:?}"),
                });
            }
            out.push(StageShape { grid, channels });
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(TapirError::Validation("encoder needs ≥1 stage".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(TapirError::Validation("dropout must lie in [0,1)".into()));
        }
        self.stage_shapes().map(|_| ())
    }

    pub fn token_count(&self) -> usize {
        let s = self.stage_shapes().expect("validated config");
        let g = s[0].grid;
        g.0 * g.1 * g.2
    }

    /// Channel width of the final grid and class embedding.
    pub fn final_channels(&self) -> usize {
        self.stage_shapes().expect("validated config").last().unwrap().channels
    }

    /// Create all encoder parameters (idempotent).
    pub fn init_params(&self, store: &mut ParamStore) {
        let (pt, ph, pw) = self.patch;
        let in_dim = pt * ph * pw * 3;
        store.ensure(
            "encoder.embed.w",
            &[in_dim, self.c0],
            Init::XavierUniform { fan_in: in_dim, fan_out: self.c0 },
        );
        store.ensure("encoder.embed.b", &[self.c0], Init::Zeros);
        let n = self.token_count();
        store.ensure("encoder.pos", &[n + 1, self.c0], Init::Normal { std: 0.02 });
        store.ensure("encoder.cls", &[1, self.c0], Init::Normal { std: 0.02 });
        let mut channels = self.c0;
        for (si, stage) in self.stages.iter().enumerate() {
            let prev = channels;
            channels *= stage.channel_mult;
            if si > 0 {
                store.ensure(
                    &format!("encoder.s{si}.expand.w"),
                    &[prev, channels],
                    Init::XavierUniform { fan_in: prev, fan_out: channels },
                );
                store.ensure(&format!("encoder.s{si}.expand.b"), &[channels], Init::Zeros);
            }
            for b in 0..stage.blocks {
                let p = format!("encoder.s{si}.b{b}");
                for ln in ["ln1", "ln2"] {
                    store.ensure(&format!("{p}.{ln}.g"), &[channels], Init::Ones);
                    store.ensure(&format!("{p}.{ln}.b"), &[channels], Init::Zeros);
                }
                for w in ["wq", "wk", "wv", "wo"] {
                    store.ensure(
                        &format!("{p}.{w}"),
                        &[channels, channels],
                        Init::XavierUniform { fan_in: channels, fan_out: channels },
                    );
                }
                for b_ in ["bq", "bk", "bv", "bo"] {
                    store.ensure(&format!("{p}.{b_}"), &[channels], Init::Zeros);
                }
                let hidden = channels * self.mlp_ratio;
                store.ensure(
                    &format!("{p}.mlp.w1"),
                    &[channels, hidden],
                    Init::XavierUniform { fan_in: channels, fan_out: hidden },
                );
                store.ensure(&format!("{p}.mlp.b1"), &[hidden], Init::Zeros);
                store.ensure(
                    &format!("{p}.mlp.w2"),
                    &[hidden, channels],
                    Init::XavierUniform { fan_in: hidden, fan_out: channels },
                );
                store.ensure(&format!("{p}.mlp.b2"), &[channels], Init::Zeros);
            }
        }
        store.ensure("encoder.final_ln.g", &[channels], Init::Ones);
        store.ensure("encoder.final_ln.b", &[channels], Init::Zeros);
    }
}

/// Tokens plus their grid geometry while flowing through the stages. Row 0
/// is the class token; rows 1.. are the grid in (t, h, w) row-major order.
#[derive(Debug, Clone, Copy)]
pub struct TokenState {
    pub tokens: Var,
    pub grid: (usize, usize, usize),
    pub channels: usize,
}

pub struct EncoderOutput {
    /// (1, C) class-token embedding after the final norm.
    pub class_embedding: Var,
    /// (T', H', W', C) final feature grid after the final norm.
    pub final_grid: Var,
}

/// Attention internals exposed for oracle tests.
pub struct BlockTrace {
    pub state: TokenState,
    /// Attention output (after the output projection, before residual).
    pub attn_out: Var,
    /// Per-head attention matrices, each (n_queries, n_keys).
    pub attn_rows: Vec<Var>,
}

/// Cut the clip into cube patches: rows are (t·h·w·3)-long flattened cubes in
/// (t, h, w) patch order.
pub fn cube_patches(clip: &ArrayD<f64>, config: &EncoderConfig) -> Result<ArrayD<f64>> {
    let (pt, ph, pw) = config.patch;
    let shape = clip.shape();
    let expected = [config.clip_t, config.image_size.0, config.image_size.1, 3];
    if shape != expected {
        return Err(TapirError::Shape {
            expected: format!("{expected:?}"),
            got: format!("{shape:?}"),
        });
    }
    let (gt, gh, gw) = (expected[0] / pt, expected[1] / ph, expected[2] / pw);
    let row_len = pt * ph * pw * 3;
    let mut out = ArrayD::zeros(IxDyn(&[gt * gh * gw, row_len]));
    for it in 0..gt {
        for iy in 0..gh {
            for ix in 0..gw {
                let row = (it * gh + iy) * gw + ix;
                let mut col = 0;
                for dt in 0..pt {
                    for dy in 0..ph {
                        for dx in 0..pw {
                            for c in 0..3 {
                                out[[row, col]] =
                                    clip[[it * pt + dt, iy * ph + dy, ix * pw + dx, c]];
                                col += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Pool the grid rows of a token matrix (class row bypasses pooling).
fn pool_tokens(
    sess: &mut Session,
    tokens: Var,
    grid: (usize, usize, usize),
    channels: usize,
    stride: (usize, usize, usize),
) -> (Var, (usize, usize, usize)) {
    if stride == (1, 1, 1) {
        return (tokens, grid);
    }
    let n = grid.0 * grid.1 * grid.2;
    let cls = sess.tape.slice(tokens, &[(0, 1), (0, channels)]);
    let body = sess.tape.slice(tokens, &[(1, n + 1), (0, channels)]);
    let body = sess
        .tape
        .reshape(body, &[grid.0, grid.1, grid.2, channels]);
    let pooled = sess
        .tape
        .avg_pool_grid(body, [stride.0, stride.1, stride.2]);
    let new_grid = (grid.0 / stride.0, grid.1 / stride.1, grid.2 / stride.2);
    let pooled = sess
        .tape
        .reshape(pooled, &[new_grid.0 * new_grid.1 * new_grid.2, channels]);
    let out = sess.tape.concat(&[cls, pooled], 0);
    (out, new_grid)
}

fn linear(sess: &mut Session, x: Var, w: &str, b: &str) -> Var {
    let wv = sess.param(w);
    let bv = sess.param(b);
    let y = sess.tape.matmul(x, wv);
    sess.tape.add(y, bv)
}

fn layer_norm_p(sess: &mut Session, x: Var, prefix: &str) -> Var {
    let g = sess.param(&format!("{prefix}.g"));
    let b = sess.param(&format!("{prefix}.b"));
    sess.tape.layer_norm(x, g, b, LN_EPS)
}

fn maybe_dropout(sess: &mut Session, x: Var, rate: f64, rng: &mut Option<&mut ChaCha20Rng>) -> Var {
    let Some(rng) = rng.as_deref_mut() else {
        return x;
    };
    if rate <= 0.0 {
        return x;
    }
    let shape: Vec<usize> = sess.tape.shape(x).to_vec();
    let keep = 1.0 - rate;
    let mask = ArrayD::from_shape_fn(IxDyn(&shape), |_| {
        if rng.gen::<f64>() < keep {
            1.0 / keep
        } else {
            0.0
        }
    });
    let m = sess.constant(mask);
    sess.tape.mul(x, m)
}

/// One pooling-attention block. `q_stride` shrinks the output resolution;
/// the class token always bypasses pooling and attends to all pooled keys.
#[allow(clippy::too_many_arguments)]
pub fn mhpa_block(
    sess: &mut Session,
    state: TokenState,
    prefix: &str,
    heads: usize,
    q_stride: (usize, usize, usize),
    kv_stride: (usize, usize, usize),
    mlp_ratio: usize,
    dropout: f64,
    rng: &mut Option<&mut ChaCha20Rng>,
) -> BlockTrace {
    let c = state.channels;
    let dh = c / heads;
    assert!(dh * heads == c, "channels divisible by heads");

    let x_norm = layer_norm_p(sess, state.tokens, &format!("{prefix}.ln1"));
    let q = linear(sess, x_norm, &format!("{prefix}.wq"), &format!("{prefix}.bq"));
    let k = linear(sess, x_norm, &format!("{prefix}.wk"), &format!("{prefix}.bk"));
    let v = linear(sess, x_norm, &format!("{prefix}.wv"), &format!("{prefix}.bv"));

    let (q, q_grid) = pool_tokens(sess, q, state.grid, c, q_stride);
    let (k, _) = pool_tokens(sess, k, state.grid, c, kv_stride);
    let (v, _) = pool_tokens(sess, v, state.grid, c, kv_stride);
    let nq = sess.tape.shape(q)[0];
    let nk = sess.tape.shape(k)[0];

    let mut head_outputs = Vec::with_capacity(heads);
    let mut attn_rows = Vec::with_capacity(heads);
    for h in 0..heads {
        let ch = (h * dh, (h + 1) * dh);
        let qh = sess.tape.slice(q, &[(0, nq), ch]);
        let kh = sess.tape.slice(k, &[(0, nk), ch]);
        let vh = sess.tape.slice(v, &[(0, nk), ch]);
        let kt = sess.tape.transpose2(kh);
        let scores = sess.tape.matmul(qh, kt);
        let scores = sess.tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = sess.tape.softmax_last(scores);
        attn_rows.push(attn);
        head_outputs.push(sess.tape.matmul(attn, vh));
    }
    let concat = sess.tape.concat(&head_outputs, 1);
    let attn_out = linear(sess, concat, &format!("{prefix}.wo"), &format!("{prefix}.bo"));
    let attn_out = maybe_dropout(sess, attn_out, dropout, rng);

    // Residual over the pooled input.
    let (residual, _) = pool_tokens(sess, state.tokens, state.grid, c, q_stride);
    let x = sess.tape.add(residual, attn_out);

    let x_norm2 = layer_norm_p(sess, x, &format!("{prefix}.ln2"));
    let hid = linear(sess, x_norm2, &format!("{prefix}.mlp.w1"), &format!("{prefix}.mlp.b1"));
    let hid = sess.tape.gelu(hid);
    let _ = mlp_ratio; // hidden width fixed at parameter creation
    let mlp = linear(sess, hid, &format!("{prefix}.mlp.w2"), &format!("{prefix}.mlp.b2"));
    let mlp = maybe_dropout(sess, mlp, dropout, rng);
    let out = sess.tape.add(x, mlp);

    BlockTrace {
        state: TokenState {
            tokens: out,
            grid: q_grid,
            channels: c,
        },
        attn_out,
        attn_rows,
    }
}

/// Embed a clip into the initial token state (class token plus positional
/// embedding included).
pub fn embed_clip(
    sess: &mut Session,
    clip: &ArrayD<f64>,
    config: &EncoderConfig,
) -> Result<TokenState> {
    let patches = cube_patches(clip, config)?;
    let x = sess.constant(patches);
    let x = linear(sess, x, "encoder.embed.w", "encoder.embed.b");
    let cls = sess.param("encoder.cls");
    let with_cls = sess.tape.concat(&[cls, x], 0);
    let pos = sess.param("encoder.pos");
    let tokens = sess.tape.add(with_cls, pos);
    let shapes = config.stage_shapes()?;
    Ok(TokenState {
        tokens,
        grid: shapes[0].grid,
        channels: config.c0,
    })
}

/// Full forward pass through all stages.
pub fn encode(
    sess: &mut Session,
    clip: &ArrayD<f64>,
    config: &EncoderConfig,
    mut rng: Option<&mut ChaCha20Rng>,
) -> Result<EncoderOutput> {
    let mut state = embed_clip(sess, clip, config)?;
    for (si, stage) in config.stages.iter().enumerate() {
        if si > 0 {
            state.channels *= stage.channel_mult;
            let expanded = linear(
                sess,
                state.tokens,
                &format!("encoder.s{si}.expand.w"),
                &format!("encoder.s{si}.expand.b"),
            );
            state.tokens = expanded;
        }
        for b in 0..stage.blocks {
            let q_stride = if b == 0 { stage.q_stride } else { (1, 1, 1) };
            let trace = mhpa_block(
                sess,
                state,
                &format!("encoder.s{si}.b{b}"),
                stage.heads,
                q_stride,
                stage.kv_stride,
                config.mlp_ratio,
                config.dropout,
                &mut rng,
            );
            state = trace.state;
        }
    }
    let normed = layer_norm_p(sess, state.tokens, "encoder.final_ln");
    let n = state.grid.0 * state.grid.1 * state.grid.2;
    let c = state.channels;
    let class_embedding = sess.tape.slice(normed, &[(0, 1), (0, c)]);
    let body = sess.tape.slice(normed, &[(1, n + 1), (0, c)]);
    let final_grid = sess.tape.reshape(
        body,
        &[state.grid.0, state.grid.1, state.grid.2, state.channels],
    );
    Ok(EncoderOutput {
        class_embedding,
        final_grid,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::IxDyn;
    use tapir_autograd::params::rng_for;

    fn random_clip(config: &EncoderConfig, seed: u64) -> ArrayD<f64> {
        let mut rng = rng_for(seed, "clip");
        ArrayD::from_shape_fn(
            IxDyn(&[config.clip_t, config.image_size.0, config.image_size.1, 3]),
            |_| rng.gen_range(0.0..1.0),
        )
    }

    #[test]
    fn default_config_shape_ledger() {
        let config = EncoderConfig::default();
        let shapes = config.stage_shapes().unwrap();
        assert_eq!(shapes[0], StageShape { grid: (8, 8, 8), channels: 32 });
        assert_eq!(shapes[1], StageShape { grid: (8, 8, 8), channels: 32 });
        assert_eq!(shapes[2], StageShape { grid: (8, 4, 4), channels: 64 });
        assert_eq!(config.final_channels(), 64);
    }

    #[test]
    fn patch_arithmetic_example() {
        let config = EncoderConfig {
            patch: (2, 4, 4),
            clip_t: 16,
            image_size: (64, 64),
            ..EncoderConfig::default()
        };
        let shapes = config.stage_shapes().unwrap();
        assert_eq!(shapes[0].grid, (8, 16, 16));
        assert_eq!(shapes[0].channels, 32);
    }

    #[test]
    fn embed_matches_explicit_matmul() {
        let config = EncoderConfig::tiny();
        let mut store = ParamStore::new(3);
        config.init_params(&mut store);
        let clip = random_clip(&config, 1);
        let mut sess = Session::new(&store);
        let state = embed_clip(&mut sess, &clip, &config).unwrap();
        let got = sess.tape.value(state.tokens);

        // Oracle: dense matmul + bias + positional table, done by hand.
        let patches = cube_patches(&clip, &config).unwrap();
        let w = store.get("encoder.embed.w").unwrap();
        let b = store.get("encoder.embed.b").unwrap();
        let pos = store.get("encoder.pos").unwrap();
        let cls = store.get("encoder.cls").unwrap();
        let n = patches.shape()[0];
        for row in 0..=n {
            for c in 0..config.c0 {
                let base = if row == 0 {
                    cls[[0, c]]
                } else {
                    let mut acc = b[[c]];
                    for j in 0..patches.shape()[1] {
                        acc += patches[[row - 1, j]] * w[[j, c]];
                    }
                    acc
                };
                let expect = base + pos[[row, c]];
                assert!(
                    (got[[row, c]] - expect).abs() < 1e-5,
                    "token {row} channel {c}"
                );
            }
        }
    }

    #[test]
    fn zero_clip_with_zero_projection_gives_bias_plus_positions() {
        let config = EncoderConfig::tiny();
        let mut store = ParamStore::new(3);
        config.init_params(&mut store);
        let in_dim = 2 * 4 * 4 * 3;
        store.insert("encoder.embed.w", ArrayD::zeros(IxDyn(&[in_dim, config.c0])));
        let clip = ArrayD::zeros(IxDyn(&[4, 8, 8, 3]));
        let mut sess = Session::new(&store);
        let state = embed_clip(&mut sess, &clip, &config).unwrap();
        let got = sess.tape.value(state.tokens);
        let pos = store.get("encoder.pos").unwrap();
        let b = store.get("encoder.embed.b").unwrap();
        for row in 1..got.shape()[0] {
            for c in 0..config.c0 {
                assert!((got[[row, c]] - (b[[c]] + pos[[row, c]])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unit_stride_block_matches_naive_attention_oracle() {
        // Single head, identity value/output projections, zero biases:
        // the attention sublayer must equal softmax(QK^T/√d)·V computed by
        // hand on the layer-normed input.
        let config = EncoderConfig {
            patch: (2, 4, 4),
            c0: 6,
            clip_t: 2,
            image_size: (8, 8),
            stages: vec![StageConfig {
                blocks: 1,
                heads: 1,
                q_stride: (1, 1, 1),
                kv_stride: (1, 1, 1),
                channel_mult: 1,
            }],
            mlp_ratio: 2,
            dropout: 0.0,
        };
        let mut store = ParamStore::new(12);
        config.init_params(&mut store);
        let eye = ArrayD::from_shape_fn(IxDyn(&[6, 6]), |ix| if ix[0] == ix[1] { 1.0 } else { 0.0 });
        store.insert("encoder.s0.b0.wv", eye.clone());
        store.insert("encoder.s0.b0.wo", eye);
        store.insert("encoder.s0.b0.bv", ArrayD::zeros(IxDyn(&[6])));
        store.insert("encoder.s0.b0.bo", ArrayD::zeros(IxDyn(&[6])));

        let clip = random_clip(&config, 7);
        let mut sess = Session::new(&store);
        let state = embed_clip(&mut sess, &clip, &config).unwrap();
        let tokens_val = sess.tape.value(state.tokens).clone();
        let trace = mhpa_block(
            &mut sess,
            state,
            "encoder.s0.b0",
            1,
            (1, 1, 1),
            (1, 1, 1),
            2,
            0.0,
            &mut None,
        );
        let got = sess.tape.value(trace.attn_out);

        // Hand-rolled oracle on raw ndarray values.
        let g = store.get("encoder.s0.b0.ln1.g").unwrap();
        let be = store.get("encoder.s0.b0.ln1.b").unwrap();
        let wq = store.get("encoder.s0.b0.wq").unwrap();
        let wk = store.get("encoder.s0.b0.wk").unwrap();
        let n = tokens_val.shape()[0];
        let c = 6usize;
        let mut xn = ndarray::Array2::<f64>::zeros((n, c));
        for i in 0..n {
            let row: Vec<f64> = (0..c).map(|j| tokens_val[[i, j]]).collect();
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / c as f64;
            for j in 0..c {
                xn[[i, j]] = (row[j] - mean) / (var + LN_EPS).sqrt() * g[[j]] + be[[j]];
            }
        }
        let mut q = ndarray::Array2::<f64>::zeros((n, c));
        let mut k = ndarray::Array2::<f64>::zeros((n, c));
        for i in 0..n {
            for j in 0..c {
                for l in 0..c {
                    q[[i, j]] += xn[[i, l]] * wq[[l, j]];
                    k[[i, j]] += xn[[i, l]] * wk[[l, j]];
                }
            }
        }
        for i in 0..n {
            // softmax over keys
            let logits: Vec<f64> = (0..n)
                .map(|m| {
                    (0..c).map(|j| q[[i, j]] * k[[m, j]]).sum::<f64>() / (c as f64).sqrt()
                })
                .collect();
            let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = exps.iter().sum();
            for j in 0..c {
                let expect: f64 = (0..n).map(|m| exps[m] / z * xn[[m, j]]).sum();
                assert!(
                    (got[[i, j]] - expect).abs() < 1e-5,
                    "row {i} ch {j}: {} vs {expect}",
                    got[[i, j]]
                );
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let config = EncoderConfig::tiny();
        let mut store = ParamStore::new(5);
        config.init_params(&mut store);
        let clip = random_clip(&config, 2);
        let mut sess = Session::new(&store);
        let state = embed_clip(&mut sess, &clip, &config).unwrap();
        let trace = mhpa_block(
            &mut sess,
            state,
            "encoder.s0.b0",
            2,
            (1, 1, 1),
            (1, 2, 2),
            2,
            0.0,
            &mut None,
        );
        for attn in &trace.attn_rows {
            let a = sess.tape.value(*attn);
            let (rows, cols) = (a.shape()[0], a.shape()[1]);
            for r in 0..rows {
                let s: f64 = (0..cols).map(|c| a[[r, c]]).sum();
                assert!((s - 1.0).abs() < 1e-6, "row {r} sums to {s}");
            }
        }
    }

    #[test]
    fn query_stride_shrinks_grid_and_keeps_class_token() {
        let config = EncoderConfig::default();
        let mut store = ParamStore::new(8);
        config.init_params(&mut store);
        let clip = random_clip(&config, 3);
        let mut sess = Session::new(&store);
        let out = encode(&mut sess, &clip, &config, None).unwrap();
        let grid = sess.tape.value(out.final_grid);
        assert_eq!(grid.shape(), &[8, 4, 4, 64]);
        let cls = sess.tape.value(out.class_embedding);
        assert_eq!(cls.shape(), &[1, 64]);
        assert!(grid.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn encode_is_deterministic_without_dropout() {
        let config = EncoderConfig::tiny();
        let mut store = ParamStore::new(21);
        config.init_params(&mut store);
        let clip = random_clip(&config, 9);
        let run = || {
            let mut sess = Session::new(&store);
            let out = encode(&mut sess, &clip, &config, None).unwrap();
            sess.tape.value(out.class_embedding).clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn block_is_permutation_equivariant_at_unit_stride() {
        // Permuting grid tokens (class row fixed) permutes outputs the same
        // way when no pooling occurs.
        let config = EncoderConfig::tiny();
        let mut store = ParamStore::new(31);
        config.init_params(&mut store);
        let clip = random_clip(&config, 4);

        let forward = |perm: Option<&[usize]>| -> ArrayD<f64> {
            let mut sess = Session::new(&store);
            let state = embed_clip(&mut sess, &clip, &config).unwrap();
            let state = match perm {
                None => state,
                Some(p) => {
                    let v = sess.tape.value(state.tokens).clone();
                    let mut permuted = v.clone();
                    for (dst, &src) in p.iter().enumerate() {
                        for c in 0..state.channels {
                            permuted[[dst + 1, c]] = v[[src + 1, c]];
                        }
                    }
                    let tokens = sess.constant(permuted);
                    TokenState { tokens, ..state }
                }
            };
            let trace = mhpa_block(
                &mut sess,
                state,
                "encoder.s0.b0",
                2,
                (1, 1, 1),
                (1, 1, 1),
                2,
                0.0,
                &mut None,
            );
            sess.tape.value(trace.state.tokens).clone()
        };

        let n = config.token_count();
        let perm: Vec<usize> = (0..n).rev().collect();
        let base = forward(None);
        let permuted = forward(Some(&perm));
        for (dst, &src) in perm.iter().enumerate() {
            for c in 0..8 {
                assert!(
                    (permuted[[dst + 1, c]] - base[[src + 1, c]]).abs() < 1e-5,
                    "token {dst} ch {c}"
                );
            }
        }
    }

    #[test]
    fn random_configs_match_shape_ledger() {
        // 20 random valid configs: actual output shape equals the ledger.
        let mut rng = rng_for(99, "shapes");
        let mut checked = 0;
        while checked < 20 {
            let heads = [1, 2][rng.gen_range(0..2)];
            let c0 = heads * [4, 6, 8][rng.gen_range(0..3)];
            let config = EncoderConfig {
                patch: (2, 4, 4),
                c0,
                clip_t: [4, 8][rng.gen_range(0..2)],
                image_size: (16, 16),
                stages: vec![
                    StageConfig {
                        blocks: 1,
                        heads,
                        q_stride: (1, 1, 1),
                        kv_stride: [(1, 1, 1), (1, 2, 2)][rng.gen_range(0..2)],
                        channel_mult: 1,
                    },
                    StageConfig {
                        blocks: 1,
                        heads,
                        q_stride: [(1, 2, 2), (2, 2, 2), (1, 1, 1)][rng.gen_range(0..3)],
                        kv_stride: (1, 1, 1),
                        channel_mult: [1, 2][rng.gen_range(0..2)],
                    },
                ],
                mlp_ratio: 2,
                dropout: 0.0,
            };
            if config.validate().is_err() {
                continue;
            }
            let mut store = ParamStore::new(checked as u64);
            config.init_params(&mut store);
            let clip = random_clip(&config, checked as u64);
            let mut sess = Session::new(&store);
            let out = encode(&mut sess, &clip, &config, None).unwrap();
            let ledger = config.stage_shapes().unwrap();
            let last = ledger.last().unwrap();
            assert_eq!(
                sess.tape.value(out.final_grid).shape(),
                &[last.grid.0, last.grid.1, last.grid.2, last.channels]
            );
            checked += 1;
        }
    }

    #[test]
    fn tiny_encoder_gradients_match_finite_differences() {
        let config = EncoderConfig::tiny();
        let mut store = ParamStore::new(17);
        config.init_params(&mut store);
        let clip = random_clip(&config, 6);

        let loss_of = |store: &ParamStore| -> f64 {
            let mut sess = Session::new(store);
            let out = encode(&mut sess, &clip, &config, None).unwrap();
            let a = sess.tape.sum_all(out.class_embedding);
            let b = sess.tape.sum_all(out.final_grid);
            let scaled = sess.tape.scale(b, 0.25);
            let loss = sess.tape.add(a, scaled);
            sess.tape.value(loss)[[]]
        };

        let analytic = {
            let mut sess = Session::new(&store);
            let out = encode(&mut sess, &clip, &config, None).unwrap();
            let a = sess.tape.sum_all(out.class_embedding);
            let b = sess.tape.sum_all(out.final_grid);
            let scaled = sess.tape.scale(b, 0.25);
            let loss = sess.tape.add(a, scaled);
            sess.grads(loss)
        };

        let checks =
            tapir_autograd::gradcheck::check_gradients(&mut store, &analytic, loss_of, 1e-5, 3);
        assert!(!checks.is_empty());
        for check in checks {
            assert!(
                check.max_rel_err < 1e-4,
                "{} rel err {}",
                check.name,
                check.max_rel_err
            );
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let config = EncoderConfig::tiny();
        let mut store = ParamStore::new(0);
        config.init_params(&mut store);
        let clip = ArrayD::zeros(IxDyn(&[4, 8, 10, 3])); // wrong width
        let mut sess = Session::new(&store);
        let err = embed_clip(&mut sess, &clip, &config).unwrap_err();
        assert!(err.to_string().contains("[4, 8, 8, 3]"));
    }
}
