//! Role-tagged tensor wrappers for the video pipeline.
//!
//! The axis conventions are fixed here once and relied on everywhere:
//! latents are frames x channels x height x width, pixel videos are
//! frames x height x width x channels, feature stacks are frames x
//! height x width x depth.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-frame latent state of one branch: F x C x H x W.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentVideo(Tensor);

impl LatentVideo {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() != 4 {
            return Err(Error::shape(format!(
                "latent video must be FxCxHxW, got {:?}",
                t.shape()
            )));
        }
        Ok(LatentVideo(t))
    }

    pub fn frames(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[3]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    /// One frame as a 1xCxHxW latent.
    pub fn frame(&self, i: usize) -> LatentVideo {
        let (c, h, w) = (self.channels(), self.height(), self.width());
        let per = c * h * w;
        let data = self.0.data()[i * per..(i + 1) * per].to_vec();
        LatentVideo(Tensor::new(vec![1, c, h, w], data).expect("frame slice"))
    }
}

/// Decoded frames: F x H x W x C. Values are nominally in [0, 1] for real
/// imagery; mock codecs may leave that range and nothing here clamps,
/// because the smoothing identities require exact round trips.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelVideo(Tensor);

impl PixelVideo {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() != 4 {
            return Err(Error::shape(format!(
                "pixel video must be FxHxWxC, got {:?}",
                t.shape()
            )));
        }
        Ok(PixelVideo(t))
    }

    pub fn frames(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[3]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    /// One frame as an HxWxC tensor.
    pub fn frame(&self, i: usize) -> Tensor {
        let (h, w, c) = (self.height(), self.width(), self.channels());
        let per = h * w * c;
        let data = self.0.data()[i * per..(i + 1) * per].to_vec();
        Tensor::new(vec![h, w, c], data).expect("frame slice")
    }

    pub fn set_frame(&mut self, i: usize, frame: &Tensor) -> Result<()> {
        let (h, w, c) = (self.height(), self.width(), self.channels());
        if frame.shape() != [h, w, c] {
            return Err(Error::shape(format!(
                "frame shape {:?} does not match video {:?}",
                frame.shape(),
                self.0.shape()
            )));
        }
        let per = h * w * c;
        self.0.data_mut()[i * per..(i + 1) * per].copy_from_slice(frame.data());
        Ok(())
    }
}

/// Inversion features used for point matching: N x h x w x d.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStack(Tensor);

impl FeatureStack {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() != 4 {
            return Err(Error::shape(format!(
                "feature stack must be NxHxWxD, got {:?}",
                t.shape()
            )));
        }
        Ok(FeatureStack(t))
    }

    pub fn frames(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn depth(&self) -> usize {
        self.0.shape()[3]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    /// Feature vector at (frame, row, col).
    pub fn at(&self, frame: usize, row: usize, col: usize) -> &[f64] {
        let (h, w, d) = (self.height(), self.width(), self.depth());
        let base = ((frame * h + row) * w + col) * d;
        &self.0.data()[base..base + d]
    }
}

/// Binary masks, one grid per frame. Stored as 0/1 bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSequence {
    frames: usize,
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl MaskSequence {
    pub fn new(frames: usize, height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != frames * height * width {
            return Err(Error::shape(format!(
                "mask sequence {}x{}x{} wants {} values, got {}",
                frames,
                height,
                width,
                frames * height * width,
                data.len()
            )));
        }
        if data.iter().any(|&v| v > 1) {
            return Err(Error::arg("mask values must be 0 or 1"));
        }
        Ok(MaskSequence {
            frames,
            height,
            width,
            data,
        })
    }

    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        MaskSequence {
            frames,
            height,
            width,
            data: vec![0; frames * height * width],
        }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, frame: usize, row: usize, col: usize) -> u8 {
        self.data[(frame * self.height + row) * self.width + col]
    }

    pub fn set(&mut self, frame: usize, row: usize, col: usize, v: u8) {
        debug_assert!(v <= 1);
        self.data[(frame * self.height + row) * self.width + col] = v;
    }

    pub fn frame(&self, i: usize) -> &[u8] {
        let per = self.height * self.width;
        &self.data[i * per..(i + 1) * per]
    }

    pub fn set_frame(&mut self, i: usize, values: &[u8]) {
        let per = self.height * self.width;
        debug_assert_eq!(values.len(), per);
        self.data[i * per..(i + 1) * per].copy_from_slice(values);
    }

    /// Single-frame sequence from a flat 0/1 grid.
    pub fn single(height: usize, width: usize, values: Vec<u8>) -> Result<Self> {
        MaskSequence::new(1, height, width, values)
    }
}
