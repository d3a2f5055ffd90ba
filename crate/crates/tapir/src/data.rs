//! Loading rendered frames back from disk into training tensors.
//!
//! Videos are small (64×64, a few hundred frames) so each one is held in
//! memory after first touch. Tensors are f64 in [0, 1], frames stored
//! `(H, W, 3)` and clips `(T, H, W, 3)`.

use crate::annotation::{clip_window, DatasetIndex, VideoMeta};
use crate::{Result, TapirError};
use ndarray::{ArrayD, IxDyn};
use std::collections::HashMap;
use std::path::{Path, PathBuf};

pub struct FrameCache {
    root: PathBuf,
    videos: HashMap<String, Vec<ArrayD<f64>>>,
}

impl FrameCache {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
            videos: HashMap::new(),
        }
    }

    pub fn frame_path(root: &Path, video_id: &str, frame_index: usize) -> PathBuf {
        root.join("videos").join(video_id).join(format!("{frame_index:05}.png"))
    }

    fn load_video(&mut self, video: &VideoMeta) -> Result<()> {
        if self.videos.contains_key(&video.video_id) {
            return Ok(());
        }
        let mut frames = Vec::with_capacity(video.frame_count);
        for i in 0..video.frame_count {
            let path = Self::frame_path(&self.root, &video.video_id, i);
            let img = image::open(&path)
                .map_err(|e| TapirError::Parse {
                    path: path.display().to_string(),
                    message: format!("png decode: {e}"),
                })?
                .to_rgb8();
            let (w, h) = (img.width() as usize, img.height() as usize);
            let mut arr = ArrayD::zeros(IxDyn(&[h, w, 3]));
            for (x, y, p) in img.enumerate_pixels() {
                for c in 0..3 {
                    arr[[y as usize, x as usize, c]] = p.0[c] as f64 / 255.0;
                }
            }
            frames.push(arr);
        }
        self.videos.insert(video.video_id.clone(), frames);
        Ok(())
    }

    /// Single frame `(H, W, 3)`.
    pub fn frame(&mut self, video: &VideoMeta, frame_index: usize) -> Result<&ArrayD<f64>> {
        if frame_index >= video.frame_count {
            return Err(TapirError::Validation(format!(
                "frame {frame_index} out of range for {} ({} frames)",
                video.video_id, video.frame_count
            )));
        }
        self.load_video(video)?;
        Ok(&self.videos[&video.video_id][frame_index])
    }

    /// Clip `(t, H, W, 3)` centered on `frame_index` (window indices clamp
    /// at the video boundary).
    pub fn clip(
        &mut self,
        video: &VideoMeta,
        frame_index: usize,
        t: usize,
        stride: usize,
    ) -> Result<ArrayD<f64>> {
        self.load_video(video)?;
        let window = clip_window(frame_index, video.frame_count, t, stride);
        let frames = &self.videos[&video.video_id];
        let (h, w) = (frames[0].shape()[0], frames[0].shape()[1]);
        let mut out = ArrayD::zeros(IxDyn(&[t, h, w, 3]));
        for (i, &fi) in window.iter().enumerate() {
            let f = &frames[fi];
            for y in 0..h {
                for x in 0..w {
                    for c in 0..3 {
                        out[[i, y, x, c]] = f[[y, x, c]];
                    }
                }
            }
        }
        Ok(out)
    }

    /// Drop cached frames for all videos (tests use this to bound memory).
    pub fn clear(&mut self) {
        self.videos.clear();
    }
}

/// Look up a video's metadata or fail with its id.
pub fn video_meta<'a>(index: &'a DatasetIndex, video_id: &str) -> Result<&'a VideoMeta> {
    index
        .video(video_id)
        .ok_or_else(|| TapirError::Validation(format!("unknown video {video_id}")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthetic::{render_dataset, GeneratorConfig};
    use tempfile::TempDir;

    fn tiny_dataset() -> (TempDir, crate::synthetic::RenderedDataset) {
        let dir = TempDir::new().unwrap();
        let config = GeneratorConfig {
            n_videos: 1,
            frames_per_video: 12,
            fps: 2,
            keyframe_stride_dense: 2,
            keyframe_stride_sparse: 6,
            seed: 50,
            ..GeneratorConfig::default()
        };
        let ds = render_dataset(&config, dir.path()).unwrap();
        (dir, ds)
    }

    #[test]
    fn frames_round_trip_through_png() {
        let (dir, ds) = tiny_dataset();
        let mut cache = FrameCache::new(dir.path());
        let video = &ds.index.videos[0];
        let f = cache.frame(video, 0).unwrap();
        assert_eq!(f.shape(), &[64, 64, 3]);
        // plausible image content: every value in [0,1], not all equal
        assert!(f.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let first = f[[0, 0, 0]];
        assert!(f.iter().any(|&v| (v - first).abs() > 1e-6));
    }

    #[test]
    fn clip_has_centered_window_and_clamps() {
        let (dir, ds) = tiny_dataset();
        let mut cache = FrameCache::new(dir.path());
        let video = &ds.index.videos[0];
        let clip = cache.clip(video, 0, 4, 1).unwrap();
        assert_eq!(clip.shape(), &[4, 64, 64, 3]);
        // window for frame 0 with t=4 clamps: [0,0,0,1] — slots 0..2 equal
        for y in 0..8 {
            for x in 0..8 {
                for c in 0..3 {
                    assert_eq!(clip[[0, y, x, c]], clip[[1, y, x, c]]);
                    assert_eq!(clip[[1, y, x, c]], clip[[2, y, x, c]]);
                }
            }
        }
    }

    #[test]
    fn out_of_range_frame_is_error() {
        let (dir, ds) = tiny_dataset();
        let mut cache = FrameCache::new(dir.path());
        let video = &ds.index.videos[0];
        assert!(cache.frame(video, 99).is_err());
    }
}
