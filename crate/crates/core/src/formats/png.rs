//! PNG carriers: 8-bit grayscale masks (value >= 128 is foreground) and
//! 8-bit RGB frames in zero-padded `%05d.png` directories.

use std::path::{Path, PathBuf};

use image::{GrayImage, ImageReader, RgbImage};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::video::{MaskSequence, PixelVideo};

/// Read a single-channel mask; any pixel >= 128 becomes foreground.
pub fn read_mask(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<u8>)> {
    let path = path.as_ref();
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .decode()
        .map_err(|e| Error::format(path, e.to_string()))?
        .into_luma8();
    let (w, h) = img.dimensions();
    let data = img.pixels().map(|p| u8::from(p.0[0] >= 128)).collect();
    Ok((h as usize, w as usize, data))
}

/// Write a binary grid as an 8-bit grayscale PNG (0 or 255).
pub fn write_mask(height: usize, width: usize, values: &[u8], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if values.len() != height * width {
        return Err(Error::shape(format!(
            "mask {}x{} wants {} values, got {}",
            height,
            width,
            height * width,
            values.len()
        )));
    }
    let img = GrayImage::from_raw(
        width as u32,
        height as u32,
        values.iter().map(|&v| if v != 0 { 255 } else { 0 }).collect(),
    )
    .expect("sized buffer");
    img.save(path).map_err(|e| Error::format(path, e.to_string()))
}

fn frame_name(i: usize) -> String {
    format!("{i:05}.png")
}

/// The sorted `%05d.png` entries of a frame directory.
pub fn list_frames(dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = dir.as_ref();
    let mut frames: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|e| e == "png"))
        .collect();
    frames.sort();
    if frames.is_empty() {
        return Err(Error::format(dir, "no .png frames found"));
    }
    Ok(frames)
}

/// Load an RGB frame directory as an Fx H x W x 3 video scaled to [0, 1].
pub fn read_frames(dir: impl AsRef<Path>) -> Result<PixelVideo> {
    let paths = list_frames(&dir)?;
    let mut shape = None;
    let mut data = Vec::new();
    for path in &paths {
        let img = ImageReader::open(path)
            .map_err(|e| Error::io(path, e))?
            .decode()
            .map_err(|e| Error::format(path, e.to_string()))?
            .into_rgb8();
        let (w, h) = img.dimensions();
        match shape {
            None => shape = Some((h, w)),
            Some(s) if s == (h, w) => {}
            Some((sh, sw)) => {
                return Err(Error::shape(format!(
                    "frame {} is {}x{}, expected {}x{}",
                    path.display(),
                    h,
                    w,
                    sh,
                    sw
                )))
            }
        }
        data.extend(img.as_raw().iter().map(|&b| b as f64 / 255.0));
    }
    let (h, w) = shape.expect("at least one frame");
    PixelVideo::new(Tensor::new(
        vec![paths.len(), h as usize, w as usize, 3],
        data,
    )?)
}

/// Write a pixel video (channels must be 3) as `%05d.png` frames,
/// clamping to [0, 1].
pub fn write_frames(video: &PixelVideo, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    if video.channels() != 3 {
        return Err(Error::shape(format!(
            "PNG frames need 3 channels, video has {}",
            video.channels()
        )));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for i in 0..video.frames() {
        let frame = video.frame(i);
        let bytes: Vec<u8> = frame
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect();
        let img = RgbImage::from_raw(video.width() as u32, video.height() as u32, bytes)
            .expect("sized buffer");
        let path = dir.join(frame_name(i));
        img.save(&path)
            .map_err(|e| Error::format(path, e.to_string()))?;
    }
    Ok(())
}

/// Read a directory of mask PNGs as a MaskSequence.
pub fn read_mask_dir(dir: impl AsRef<Path>) -> Result<MaskSequence> {
    let paths = list_frames(&dir)?;
    let mut dims = None;
    let mut data = Vec::new();
    for path in &paths {
        let (h, w, values) = read_mask(path)?;
        match dims {
            None => dims = Some((h, w)),
            Some(d) if d == (h, w) => {}
            Some((dh, dw)) => {
                return Err(Error::shape(format!(
                    "mask {} is {}x{}, expected {}x{}",
                    path.display(),
                    h,
                    w,
                    dh,
                    dw
                )))
            }
        }
        data.extend(values);
    }
    let (h, w) = dims.expect("at least one mask");
    MaskSequence::new(paths.len(), h, w, data)
}

/// Write every frame of a MaskSequence as `%05d.png`.
pub fn write_mask_dir(masks: &MaskSequence, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for i in 0..masks.frames() {
        write_mask(
            masks.height(),
            masks.width(),
            masks.frame(i),
            dir.join(frame_name(i)),
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let values = vec![1, 0, 0, 1, 1, 0];
        write_mask(2, 3, &values, &p).unwrap();
        let (h, w, back) = read_mask(&p).unwrap();
        assert_eq!((h, w), (2, 3));
        assert_eq!(back, values);
        // and the file itself is stable
        let bytes = std::fs::read(&p).unwrap();
        write_mask(h, w, &back, &p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), bytes);
    }

    #[test]
    fn threshold_is_128() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.png");
        let img = GrayImage::from_raw(2, 1, vec![127, 128]).unwrap();
        img.save(&p).unwrap();
        let (_, _, values) = read_mask(&p).unwrap();
        assert_eq!(values, vec![0, 1]);
    }

    #[test]
    fn frame_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let video = PixelVideo::new(
            Tensor::new(
                vec![2, 2, 2, 3],
                (0..24).map(|i| (i as f64) / 23.0).collect(),
            )
            .unwrap(),
        )
        .unwrap();
        write_frames(&video, dir.path()).unwrap();
        let back = read_frames(dir.path()).unwrap();
        assert_eq!(back.frames(), 2);
        // 8-bit carrier: equal to within one quantization step
        assert!(back.tensor().max_abs_diff(video.tensor()) <= 0.5 / 255.0);
    }
}
