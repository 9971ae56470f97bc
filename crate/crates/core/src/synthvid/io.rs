//! On-disk dataset layout:
//!
//! ```text
//! root/meta.json
//! root/clips/<clip_id>/labels.json
//! root/clips/<clip_id>/frames/000000.png   8-bit RGB
//! root/clips/<clip_id>/masks/000000.png    16-bit grey, pixel = instance id
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, Luma, RgbImage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Clip, Dataset};
use crate::error::{Error, Result};
use crate::pseudomask::{Instance, InstanceSet, Mask};

const FORMAT: &str = "weaksurg-synthvid/1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipMeta {
    pub id: String,
    pub num_frames: usize,
    /// Instance id (as a string key) → class id.
    pub instance_classes: BTreeMap<String, usize>,
    /// Relative path → SHA-256 hex digest.
    pub checksums: BTreeMap<String, String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub format: String,
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub image_size: usize,
    pub clips: Vec<ClipMeta>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn encode_png<P, C>(img: &ImageBuffer<P, C>, path: &Path) -> Result<Vec<u8>>
where
    P: image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, image::ImageFormat::Png)
        .map_err(|e| Error::io(path, e))?;
    Ok(buf.into_inner())
}

pub fn write_dataset(dataset: &Dataset, root: &Path) -> Result<DatasetMeta> {
    let mut clips = Vec::with_capacity(dataset.clips.len());
    for clip in &dataset.clips {
        let dir = PathBuf::from("clips").join(&clip.id);
        let mut checksums = BTreeMap::new();
        let mut put = |rel: PathBuf, bytes: Vec<u8>| -> Result<()> {
            write_file(&root.join(&rel), &bytes)?;
            checksums.insert(rel.to_string_lossy().replace('\\', "/"), sha256_hex(&bytes));
            Ok(())
        };

        let labels = serde_json::to_vec(&clip.presence).map_err(|e| Error::io(root.join(&dir), e))?;
        put(dir.join("labels.json"), labels)?;

        for (f, (frame, insts)) in clip.frames.iter().zip(&clip.gt_instances).enumerate() {
            let frame_rel = dir.join("frames").join(format!("{f:06}.png"));
            put(frame_rel.clone(), encode_png(frame, &frame_rel)?)?;

            let (w, h) = frame.dimensions();
            let mut ids: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::new(w, h);
            for inst in insts {
                let id = u16::try_from(inst.id)
                    .map_err(|_| Error::Config(format!("instance id {} exceeds 16 bits", inst.id)))?;
                for (i, &b) in inst.mask.bits.iter().enumerate() {
                    if b {
                        ids.put_pixel((i % w as usize) as u32, (i / w as usize) as u32, Luma([id]));
                    }
                }
            }
            let mask_rel = dir.join("masks").join(format!("{f:06}.png"));
            put(mask_rel.clone(), encode_png(&ids, &mask_rel)?)?;
        }

        clips.push(ClipMeta {
            id: clip.id.clone(),
            num_frames: clip.len(),
            instance_classes: clip
                .instance_classes
                .iter()
                .map(|(k, v)| (k.to_string(), *v))
                .collect(),
            checksums,
        });
    }

    let meta = DatasetMeta {
        format: FORMAT.to_string(),
        num_classes: dataset.num_classes,
        class_names: dataset.class_names.clone(),
        image_size: dataset.image_size,
        clips,
    };
    let meta_path = root.join("meta.json");
    let bytes = serde_json::to_vec_pretty(&meta).map_err(|e| Error::io(&meta_path, e))?;
    write_file(&meta_path, &bytes)?;
    Ok(meta)
}

fn read_checked(root: &Path, rel: &Path, checksums: &BTreeMap<String, String>) -> Result<Vec<u8>> {
    let path = root.join(rel);
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let key = rel.to_string_lossy().replace('\\', "/");
    match checksums.get(&key) {
        Some(expected) if *expected != sha256_hex(&bytes) => Err(Error::io(&path, "checksum mismatch")),
        _ => Ok(bytes),
    }
}

/// Decode an instance-id raster (0 = background) into an instance set, ordered by id.
pub fn instances_from_id_map(
    ids: &[u16],
    width: usize,
    height: usize,
    classes: &BTreeMap<u32, usize>,
) -> std::result::Result<InstanceSet, u32> {
    let mut masks: BTreeMap<u32, Mask> = BTreeMap::new();
    for (i, &id) in ids.iter().enumerate() {
        if id == 0 {
            continue;
        }
        masks
            .entry(id as u32)
            .or_insert_with(|| Mask::empty(width, height))
            .bits[i] = true;
    }
    masks
        .into_iter()
        .map(|(id, mask)| {
            let class_id = *classes.get(&id).ok_or(id)?;
            Ok(Instance {
                id,
                class_id,
                score: 1.0,
                mask,
            })
        })
        .collect()
}

pub fn read_dataset(root: &Path) -> Result<Dataset> {
    let meta_path = root.join("meta.json");
    let bytes = fs::read(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: DatasetMeta = serde_json::from_slice(&bytes).map_err(|e| Error::io(&meta_path, e))?;
    if meta.format != FORMAT {
        return Err(Error::io(&meta_path, format!("unsupported format {:?}", meta.format)));
    }

    let mut clips = Vec::with_capacity(meta.clips.len());
    for cm in &meta.clips {
        let dir = PathBuf::from("clips").join(&cm.id);
        let instance_classes: BTreeMap<u32, usize> = cm
            .instance_classes
            .iter()
            .map(|(k, v)| {
                let id = k
                    .parse::<u32>()
                    .map_err(|_| Error::io(&meta_path, format!("bad instance id {k:?}")))?;
                if *v >= meta.num_classes {
                    return Err(Error::io(&meta_path, format!("class {v} out of range")));
                }
                Ok((id, *v))
            })
            .collect::<Result<_>>()?;

        let labels_rel = dir.join("labels.json");
        let labels_path = root.join(&labels_rel);
        let raw = read_checked(root, &labels_rel, &cm.checksums)?;
        let presence: Vec<Vec<u8>> =
            serde_json::from_slice(&raw).map_err(|e| Error::io(&labels_path, format!("malformed labels: {e}")))?;
        if presence.len() != cm.num_frames
            || presence
                .iter()
                .any(|p| p.len() != meta.num_classes || p.iter().any(|&v| v > 1))
        {
            return Err(Error::io(&labels_path, "malformed labels: wrong shape or non-binary entry"));
        }

        let mut frames = Vec::with_capacity(cm.num_frames);
        let mut gt_instances = Vec::with_capacity(cm.num_frames);
        for f in 0..cm.num_frames {
            let frame_rel = dir.join("frames").join(format!("{f:06}.png"));
            let frame_path = root.join(&frame_rel);
            let bytes = read_checked(root, &frame_rel, &cm.checksums)?;
            let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
                .map_err(|e| Error::io(&frame_path, e))?;
            let img: RgbImage = match img {
                image::DynamicImage::ImageRgb8(i) => i,
                _ => return Err(Error::io(&frame_path, "expected 8-bit RGB")),
            };
            if img.width() as usize != meta.image_size || img.height() as usize != meta.image_size {
                return Err(Error::io(&frame_path, "frame size disagrees with meta.json"));
            }

            let mask_rel = dir.join("masks").join(format!("{f:06}.png"));
            let mask_path = root.join(&mask_rel);
            let bytes = read_checked(root, &mask_rel, &cm.checksums)?;
            let mask = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
                .map_err(|e| Error::io(&mask_path, e))?;
            let ids = match mask {
                image::DynamicImage::ImageLuma16(m) => m,
                _ => return Err(Error::io(&mask_path, "expected 16-bit single-channel mask")),
            };
            let (w, h) = (ids.width() as usize, ids.height() as usize);
            let insts = instances_from_id_map(ids.as_raw(), w, h, &instance_classes)
                .map_err(|id| Error::io(&mask_path, format!("instance id {id} missing from meta.json")))?;

            frames.push(img);
            gt_instances.push(insts);
        }

        clips.push(Clip {
            id: cm.id.clone(),
            frames,
            presence,
            gt_instances,
            instance_classes,
        });
    }

    Ok(Dataset {
        num_classes: meta.num_classes,
        class_names: meta.class_names,
        image_size: meta.image_size,
        clips,
    })
}
