//! `HDDS` clip datasets.
//!
//! Header: magic, version, clip count, latent width, layout width. Each clip
//! then stores its frame count, seed, anchor ids, latents, actions, layout
//! tokens and poses `(x, y, yaw, speed)`, all floats as little-endian `f32`.

use std::path::Path;

use super::codec::{read_file, write_file, Decoder, Encoder};
use crate::error::{ensure, Result};
use crate::tensor::Tensor;
use crate::worldsim::{Clip, EgoState};

pub const DATASET_MAGIC: &[u8; 4] = b"HDDS";
pub const DATASET_VERSION: u32 = 1;

pub fn encode_dataset(clips: &[Clip]) -> Result<Vec<u8>> {
    ensure!(!clips.is_empty(), "a dataset needs at least one clip");
    let (dz, dl) = (clips[0].latents.cols(), clips[0].layout.cols());
    let mut e = Encoder::default();
    e.bytes(DATASET_MAGIC);
    e.u32(DATASET_VERSION);
    e.len(clips.len())?;
    e.len(dz)?;
    e.len(dl)?;
    for c in clips {
        let f = c.frames();
        ensure!(c.latents.cols() == dz && c.layout.cols() == dl, "clips disagree on record widths");
        ensure!(
            c.layout.rows() == f && c.actions.rows() + 1 == f && c.poses.len() == f,
            "clip {} has inconsistent record lengths",
            c.seed
        );
        e.len(f)?;
        e.u64(c.seed);
        e.len(c.anchor_ids.len())?;
        for &a in &c.anchor_ids {
            e.len(a)?;
        }
        e.f32s(c.latents.data());
        e.f32s(c.actions.data());
        e.f32s(c.layout.data());
        for p in &c.poses {
            e.f32s(&[p.x as f32, p.y as f32, p.yaw as f32, p.speed as f32]);
        }
    }
    Ok(e.buf)
}

pub fn save_dataset(path: &Path, clips: &[Clip]) -> Result<()> {
    write_file(path, &encode_dataset(clips)?)
}

pub fn decode_dataset(bytes: &[u8], path: &Path) -> Result<Vec<Clip>> {
    let mut d = Decoder::new(bytes, path);
    d.magic(DATASET_MAGIC)?;
    let version = d.u32()?;
    if version != DATASET_VERSION {
        return Err(d.fail(format!("unsupported version {version}")));
    }
    let (count, dz, dl) = (d.len()?, d.len()?, d.len()?);
    if count == 0 {
        return Err(d.fail("dataset holds no clips"));
    }
    let mut clips = Vec::with_capacity(count.min(d.remaining() / 16 + 1));
    for i in 0..count {
        let f = d.len()?;
        if f < 2 {
            return Err(d.fail(format!("clip {i} has {f} frames")));
        }
        let seed = d.u64()?;
        let k = d.len()?;
        let anchor_ids = (0..k).map(|_| d.len()).collect::<Result<Vec<_>>>()?;
        let tensor = |d: &mut Decoder<'_>, rows: usize, cols: usize| -> Result<Tensor> {
            let data = d.f32s(rows * cols)?;
            Tensor::new(vec![rows, cols], data).map_err(|e| d.fail(format!("clip {i}: {e}")))
        };
        let latents = tensor(&mut d, f, dz)?;
        let actions = tensor(&mut d, f - 1, 3)?;
        let layout = tensor(&mut d, f, dl)?;
        let raw = d.f32s(4 * f)?;
        let poses = raw
            .chunks_exact(4)
            .map(|p| EgoState {
                x: p[0] as f64,
                y: p[1] as f64,
                yaw: p[2] as f64,
                speed: p[3] as f64,
            })
            .collect();
        clips.push(Clip {
            latents,
            actions,
            layout,
            poses,
            anchor_ids,
            seed,
        });
    }
    d.finish()?;
    Ok(clips)
}

pub fn load_dataset(path: &Path) -> Result<Vec<Clip>> {
    decode_dataset(&read_file(path)?, path)
}
