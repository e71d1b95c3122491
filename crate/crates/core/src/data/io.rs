//! SSV1 volume files.
//!
//! Layout: the magic `SSV1`, a little-endian `u32` rank, `rank` little-endian
//! `u32` extents, a `u8` dtype tag (0 = `f32` image, 1 = `u8` labels), then
//! the row-major payload. Images are stored `[C, D, H, W]` and label maps
//! `[D, H, W]` as `<id>.image.ssv` and `<id>.labels.ssv`.

use super::LabeledVolume;
use crate::error::{Error, Result};
use std::fs;
use std::path::{Path, PathBuf};

pub const MAGIC: &[u8; 4] = b"SSV1";
pub const IMAGE_SUFFIX: &str = ".image.ssv";
pub const LABELS_SUFFIX: &str = ".labels.ssv";

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    Image(Vec<f32>),
    Labels(Vec<u8>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SsvArray {
    pub extents: Vec<u32>,
    pub payload: Payload,
}

impl SsvArray {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let n: usize = self.extents.iter().map(|&e| e as usize).product();
        let (tag, len) = match &self.payload {
            Payload::Image(v) => (0u8, v.len()),
            Payload::Labels(v) => (1u8, v.len()),
        };
        if n != len {
            return Err(Error::Format(format!("{len} values for extents {:?}", self.extents)));
        }
        let mut out = Vec::with_capacity(9 + 4 * self.extents.len() + 4 * len);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(self.extents.len() as u32).to_le_bytes());
        for e in &self.extents {
            out.extend_from_slice(&e.to_le_bytes());
        }
        out.push(tag);
        match &self.payload {
            Payload::Image(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::Labels(v) => out.extend_from_slice(v),
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        let mut take = |n: usize, what: &str| -> Result<&[u8]> {
            if cursor.len() < n {
                return Err(Error::Format(format!("truncated before {what}")));
            }
            let (head, tail) = cursor.split_at(n);
            cursor = tail;
            Ok(head)
        };
        if take(4, "magic")? != MAGIC {
            return Err(Error::Format("missing SSV1 magic".into()));
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().expect("four bytes"));
        let rank = u32_at(take(4, "rank")?) as usize;
        let extents = (0..rank)
            .map(|_| take(4, "extents").map(u32_at))
            .collect::<Result<Vec<u32>>>()?;
        let n: usize = extents.iter().map(|&e| e as usize).product();
        let payload = match take(1, "dtype tag")?[0] {
            0 => Payload::Image(
                take(4 * n, "payload")?
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
                    .collect(),
            ),
            1 => Payload::Labels(take(n, "payload")?.to_vec()),
            t => return Err(Error::Format(format!("unknown dtype tag {t}"))),
        };
        if !cursor.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes", cursor.len())));
        }
        Ok(Self { extents, payload })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

fn extents_u32(v: &[usize]) -> Vec<u32> {
    v.iter().map(|&e| e as u32).collect()
}

/// Writes the image (narrowed to `f32`) and label files of `volume` into `dir`.
pub fn save_volume(volume: &LabeledVolume, dir: &Path) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(dir)?;
    let [d, h, w] = volume.dims;
    let image = SsvArray {
        extents: extents_u32(&[volume.channels, d, h, w]),
        payload: Payload::Image(volume.image.iter().map(|&x| x as f32).collect()),
    };
    let labels = SsvArray {
        extents: extents_u32(&[d, h, w]),
        payload: Payload::Labels(volume.labels.clone()),
    };
    let ip = dir.join(format!("{}{IMAGE_SUFFIX}", volume.id));
    let lp = dir.join(format!("{}{LABELS_SUFFIX}", volume.id));
    image.write(&ip)?;
    labels.write(&lp)?;
    Ok((ip, lp))
}

/// Reads an image file; a 3-d array is taken as a single channel.
pub fn load_image(path: &Path) -> Result<(usize, [usize; 3], Vec<f64>)> {
    let arr = SsvArray::read(path)?;
    let Payload::Image(values) = arr.payload else {
        return Err(Error::Format(format!("{} does not hold an image", path.display())));
    };
    let e: Vec<usize> = arr.extents.iter().map(|&e| e as usize).collect();
    let (c, dims) = match e.as_slice() {
        [c, d, h, w] => (*c, [*d, *h, *w]),
        [d, h, w] => (1, [*d, *h, *w]),
        _ => return Err(Error::Format(format!("image rank {} is not 3 or 4", e.len()))),
    };
    Ok((c, dims, values.into_iter().map(f64::from).collect()))
}

pub fn load_labels(path: &Path) -> Result<([usize; 3], Vec<u8>)> {
    let arr = SsvArray::read(path)?;
    let Payload::Labels(values) = arr.payload else {
        return Err(Error::Format(format!("{} does not hold labels", path.display())));
    };
    match arr.extents.as_slice() {
        [d, h, w] => Ok(([*d as usize, *h as usize, *w as usize], values)),
        e => Err(Error::Format(format!("label rank {} is not 3", e.len()))),
    }
}

/// Label file paired with an image file by stem.
pub fn labels_path_for(image: &Path) -> Option<PathBuf> {
    let name = image.file_name()?.to_str()?;
    let stem = name.strip_suffix(IMAGE_SUFFIX)?;
    Some(image.with_file_name(format!("{stem}{LABELS_SUFFIX}")))
}

pub fn load_volume(image: &Path, num_classes: usize) -> Result<LabeledVolume> {
    let id = image
        .file_name()
        .and_then(|n| n.to_str())
        .and_then(|n| n.strip_suffix(IMAGE_SUFFIX))
        .ok_or_else(|| Error::Format(format!("{} is not named <id>{IMAGE_SUFFIX}", image.display())))?;
    let (channels, dims, values) = load_image(image)?;
    let lp = labels_path_for(image).expect("suffix checked above");
    let (ldims, labels) = load_labels(&lp)?;
    if ldims != dims {
        return Err(Error::Shape(format!("image {dims:?} and labels {ldims:?} disagree for {id}")));
    }
    LabeledVolume::new(id, channels, dims, [1.0; 3], num_classes, values, labels)
}

/// Every `<id>.image.ssv` in `dir` with its label file, sorted by id.
pub fn load_dir(dir: &Path, num_classes: usize) -> Result<Vec<LabeledVolume>> {
    let mut images: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.to_str().is_some_and(|s| s.ends_with(IMAGE_SUFFIX)))
        .collect();
    images.sort();
    images.iter().map(|p| load_volume(p, num_classes)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_is_bit_exact() {
        let a = SsvArray {
            extents: vec![2, 1, 3],
            payload: Payload::Labels(vec![0, 1, 2, 3, 4, 5]),
        };
        let bytes = a.encode().unwrap();
        let mut expect = b"SSV1".to_vec();
        expect.extend_from_slice(&[3, 0, 0, 0, 2, 0, 0, 0, 1, 0, 0, 0, 3, 0, 0, 0, 1]);
        expect.extend_from_slice(&[0, 1, 2, 3, 4, 5]);
        assert_eq!(bytes, expect);
        assert_eq!(SsvArray::decode(&bytes).unwrap(), a);
    }

    #[test]
    fn image_roundtrip_and_errors() {
        let a = SsvArray {
            extents: vec![1, 2],
            payload: Payload::Image(vec![1.5, -2.25]),
        };
        let bytes = a.encode().unwrap();
        assert_eq!(&bytes[17..21], &1.5f32.to_le_bytes());
        assert_eq!(SsvArray::decode(&bytes).unwrap(), a);
        assert!(SsvArray::decode(&bytes[..bytes.len() - 1]).is_err());
        assert!(SsvArray::decode(b"SSV2\0\0\0\0\0").is_err());
        let mut bad_tag = bytes.clone();
        bad_tag[16] = 7;
        assert!(SsvArray::decode(&bad_tag).is_err());
    }

    #[test]
    fn volume_roundtrip_through_directory() {
        let dir = tempfile::tempdir().unwrap();
        let v = LabeledVolume::new("p1", 2, [2, 2, 2], [1.0; 3], 3, (0..16).map(|i| i as f64 * 0.5).collect(), vec![0, 1, 2, 0, 1, 2, 0, 1]).unwrap();
        save_volume(&v, dir.path()).unwrap();
        let loaded = load_dir(dir.path(), 3).unwrap();
        assert_eq!(loaded, vec![v]);
    }
}
