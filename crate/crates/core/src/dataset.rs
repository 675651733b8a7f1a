//! Frame-folder datasets and image files.
//!
//! A dataset directory holds, per frame `i`:
//! `frame_{i:05}.png` (8-bit RGB), `mask_{i:05}.png` (8-bit gray, 255 = object)
//! and optionally `depth_{i:05}.bin` (H×W little-endian f32), plus a single
//! `poses.json` with intrinsics and one row-major 4×4 world→camera matrix per frame.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{CameraIntrinsics, CameraPose, DepthMap, FrameObservation, Grid, Mask, RgbImage};

/// Quantizes `[0, 1]` to 8 bits, rounding half up.
pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

fn png_err(path: &Path) -> impl Fn(String) -> Error + '_ {
    move |m| Error::Png(format!("{}: {m}", path.display()))
}

fn write_png(path: &Path, width: usize, height: usize, color: png::ColorType, bytes: &[u8]) -> Result<()> {
    let file = File::create(path).map_err(Error::at_path(path))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    let e = png_err(path);
    let mut writer = enc.write_header().map_err(|x| e(x.to_string()))?;
    writer.write_image_data(bytes).map_err(|x| e(x.to_string()))?;
    writer.finish().map_err(|x| e(x.to_string()))?;
    Ok(())
}

/// Decoded 8-bit image: width, height, channels, bytes.
fn read_png(path: &Path) -> Result<(usize, usize, usize, Vec<u8>)> {
    let e = png_err(path);
    let file = File::open(path).map_err(Error::at_path(path))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|x| e(x.to_string()))?;
    let size = reader.output_buffer_size().ok_or_else(|| e("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|x| e(x.to_string()))?;
    buf.truncate(info.buffer_size());
    let channels = info.color_type.samples();
    Ok((info.width as usize, info.height as usize, channels, buf))
}

pub fn write_rgb_png(img: &RgbImage, path: impl AsRef<Path>) -> Result<()> {
    let bytes: Vec<u8> = img.as_slice().iter().flat_map(|c| c.map(to_u8)).collect();
    write_png(path.as_ref(), img.width(), img.height(), png::ColorType::Rgb, &bytes)
}

pub fn read_rgb_png(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    let (w, h, ch, bytes) = read_png(path)?;
    let px: Vec<_> = bytes
        .chunks_exact(ch)
        .map(|c| match ch {
            1 | 2 => [f64::from(c[0]) / 255.0; 3],
            _ => [c[0], c[1], c[2]].map(|v| f64::from(v) / 255.0),
        })
        .collect();
    Grid::from_vec(w, h, px)
}

pub fn write_mask_png(mask: &Mask, path: impl AsRef<Path>) -> Result<()> {
    let bytes: Vec<u8> = mask.as_slice().iter().map(|&m| if m { 255 } else { 0 }).collect();
    write_png(path.as_ref(), mask.width(), mask.height(), png::ColorType::Grayscale, &bytes)
}

/// Reads a mask; values of 128 and above count as object.
pub fn read_mask_png(path: impl AsRef<Path>) -> Result<Mask> {
    let path = path.as_ref();
    let (w, h, ch, bytes) = read_png(path)?;
    Grid::from_vec(w, h, bytes.chunks_exact(ch).map(|c| c[0] >= 128).collect())
}

pub fn write_depth_raw(depth: &DepthMap, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = BufWriter::new(File::create(path).map_err(Error::at_path(path))?);
    for &d in depth.as_slice() {
        out.write_all(&(d as f32).to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_depth_raw(path: impl AsRef<Path>, width: usize, height: usize) -> Result<DepthMap> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    File::open(path).map_err(Error::at_path(path))?.read_to_end(&mut bytes)?;
    if bytes.len() != width * height * 4 {
        return Err(Error::format(
            bytes.len().min(width * height * 4) as u64,
            format!("{}: expected {} bytes of depth", path.display(), width * height * 4),
        ));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f64::from(f32::from_le_bytes([b[0], b[1], b[2], b[3]])))
        .collect();
    Grid::from_vec(width, height, data)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PosesFile {
    pub intrinsics: CameraIntrinsics,
    /// Row-major 4×4 world→camera matrices, one per frame.
    pub world_to_camera: Vec<[f64; 16]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub frames: Vec<FrameObservation>,
    pub poses: Vec<CameraPose>,
    pub intrinsics: CameraIntrinsics,
}

fn frame_path(dir: &Path, stem: &str, i: usize, ext: &str) -> PathBuf {
    dir.join(format!("{stem}_{i:05}.{ext}"))
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(Error::at_path(dir))?;
        if self.frames.len() != self.poses.len() {
            return Err(Error::arg("frame and pose counts differ"));
        }
        for (i, f) in self.frames.iter().enumerate() {
            write_rgb_png(&f.rgb, frame_path(dir, "frame", i, "png"))?;
            write_mask_png(&f.mask, frame_path(dir, "mask", i, "png"))?;
            if let Some(d) = &f.depth {
                write_depth_raw(d, frame_path(dir, "depth", i, "bin"))?;
            }
        }
        let poses = PosesFile {
            intrinsics: self.intrinsics,
            world_to_camera: self.poses.iter().map(CameraPose::to_row_major).collect(),
        };
        let path = dir.join("poses.json");
        let f = File::create(&path).map_err(Error::at_path(&path))?;
        serde_json::to_writer_pretty(BufWriter::new(f), &poses)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join("poses.json");
        let f = File::open(&path).map_err(Error::at_path(&path))?;
        let poses_file: PosesFile = serde_json::from_reader(BufReader::new(f))?;
        let k = poses_file.intrinsics;
        k.validate()?;
        let poses = poses_file
            .world_to_camera
            .iter()
            .map(CameraPose::from_row_major)
            .collect::<Result<Vec<_>>>()?;
        let mut frames = Vec::with_capacity(poses.len());
        for i in 0..poses.len() {
            let rgb = read_rgb_png(frame_path(dir, "frame", i, "png"))?;
            let mask = read_mask_png(frame_path(dir, "mask", i, "png"))?;
            if rgb.width() != k.width || rgb.height() != k.height || !rgb.same_shape(&mask) {
                return Err(Error::Validation(format!("frame {i} does not match the intrinsics image size")));
            }
            let depth_path = frame_path(dir, "depth", i, "bin");
            let depth = if depth_path.exists() {
                Some(read_depth_raw(&depth_path, k.width, k.height)?)
            } else {
                None
            };
            frames.push(FrameObservation { rgb, mask, depth, t: i });
        }
        Ok(Self {
            frames,
            poses,
            intrinsics: k,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quantization_rounds_half_up() {
        assert_eq!(to_u8(0.0), 0);
        assert_eq!(to_u8(1.0), 255);
        assert_eq!(to_u8(0.5), 128);
        assert_eq!(to_u8(127.5 / 255.0), 128);
        assert_eq!(to_u8(-3.0), 0);
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let k = CameraIntrinsics::from_focal_mm(35.0, 4, 3).unwrap();
        let rgb = Grid::from_vec(4, 3, (0..12).map(|i| [i as f64 / 11.0, 0.5, 1.0 - i as f64 / 11.0]).collect()).unwrap();
        let mask = Grid::from_vec(4, 3, (0..12).map(|i| i % 3 == 0).collect()).unwrap();
        let depth = Grid::from_vec(4, 3, (0..12).map(|i| 1.0 + i as f64 * 0.25).collect()).unwrap();
        let ds = Dataset {
            frames: vec![FrameObservation {
                rgb: rgb.clone(),
                mask: mask.clone(),
                depth: Some(depth.clone()),
                t: 0,
            }],
            poses: vec![CameraPose::identity()],
            intrinsics: k,
        };
        ds.save(dir.path()).unwrap();
        let back = Dataset::load(dir.path()).unwrap();
        assert_eq!(back.poses, ds.poses);
        assert_eq!(back.intrinsics, k);
        assert_eq!(back.frames[0].mask, mask);
        assert_eq!(back.frames[0].depth.as_ref().unwrap(), &depth);
        let err = back.frames[0]
            .rgb
            .as_slice()
            .iter()
            .zip(rgb.as_slice())
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max);
        assert!(err <= 0.5 / 255.0 + 1e-12);
    }
}
