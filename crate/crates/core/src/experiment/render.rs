use crate::data::LabeledVolume;
use crate::error::{Error, Result};
use std::path::Path;

/// Overlay colours for classes 1, 2, ...; repeats past the end.
pub const PALETTE: [[u8; 3]; 6] = [
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [255, 225, 25],
    [145, 30, 180],
    [70, 240, 240],
];

/// Binary PPM of one axial slice: the first channel in grayscale (min-max
/// scaled over the slice) with labelled pixels blended half-and-half with
/// their class colour. `labels` replaces the volume's own labels, e.g. with
/// a prediction.
pub fn render_slice(volume: &LabeledVolume, labels: Option<&[u8]>, slice: usize) -> Result<Vec<u8>> {
    let [d, h, w] = volume.dims;
    if slice >= d {
        return Err(Error::Extent(format!("slice {slice} outside 0..{d}")));
    }
    let labels = labels.unwrap_or(&volume.labels);
    if labels.len() != volume.voxels() {
        return Err(Error::Shape(format!(
            "{} labels for a volume of {} voxels",
            labels.len(),
            volume.voxels()
        )));
    }
    let n = h * w;
    let image = &volume.channel(0)[slice * n..(slice + 1) * n];
    let labels = &labels[slice * n..(slice + 1) * n];
    let lo = image.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = image.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * n);
    for (&v, &l) in image.iter().zip(labels) {
        let g = if hi > lo { ((v - lo) / (hi - lo) * 255.0).round() as u8 } else { 0 };
        if l == 0 {
            out.extend_from_slice(&[g, g, g]);
        } else {
            let c = PALETTE[(l as usize - 1) % PALETTE.len()];
            out.extend(c.iter().map(|&ch| ((g as u16 + ch as u16) / 2) as u8));
        }
    }
    Ok(out)
}

pub fn write_slice(volume: &LabeledVolume, labels: Option<&[u8]>, slice: usize, path: &Path) -> Result<()> {
    std::fs::write(path, render_slice(volume, labels, slice)?)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    fn pixels(ppm: &[u8]) -> BTreeSet<[u8; 3]> {
        let body = &ppm[ppm.len() - 3 * 12..];
        body.chunks(3).map(|p| [p[0], p[1], p[2]]).collect()
    }

    fn volume(labels: Vec<u8>) -> LabeledVolume {
        let image = (0..24).map(|i| (i % 5) as f64).collect();
        LabeledVolume::new("r", 1, [2, 3, 4], [1.0; 3], 3, image, labels).unwrap()
    }

    #[test]
    fn background_slice_is_gray() {
        let ppm = render_slice(&volume(vec![0; 24]), None, 1).unwrap();
        assert!(ppm.starts_with(b"P6\n4 3\n255\n"));
        assert!(pixels(&ppm).iter().all(|p| p[0] == p[1] && p[1] == p[2]));
    }

    #[test]
    fn one_class_on_flat_image_gives_two_colours() {
        let mut v = volume((0..24).map(|i| u8::from(i % 2 == 0)).collect());
        v.image = vec![0.5; 24];
        let ppm = render_slice(&v, None, 0).unwrap();
        assert_eq!(pixels(&ppm).len(), 2);
        assert_eq!(ppm, render_slice(&v, None, 0).unwrap());
    }

    #[test]
    fn override_and_range_checks() {
        let v = volume(vec![0; 24]);
        let pred = vec![2u8; 24];
        assert_ne!(render_slice(&v, Some(&pred), 0).unwrap(), render_slice(&v, None, 0).unwrap());
        assert!(render_slice(&v, None, 2).is_err());
        assert!(render_slice(&v, Some(&pred[..5]), 0).is_err());
    }
}
