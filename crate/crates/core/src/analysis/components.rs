/// A 26-connected region of one class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Region {
    pub voxels: usize,
    pub first_slice: usize,
    pub last_slice: usize,
}

impl Region {
    /// Consecutive axial slices the region spans.
    pub fn depth(&self) -> usize {
        self.last_slice - self.first_slice + 1
    }
}

/// Connected regions of `labels == class` in a `[D, H, W]` map, in scan order
/// of their first voxel.
pub fn regions(labels: &[u8], [d, h, w]: [usize; 3], class: u8) -> Vec<Region> {
    let mut seen = vec![false; labels.len()];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..labels.len() {
        if labels[start] != class || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut region = Region {
            voxels: 0,
            first_slice: usize::MAX,
            last_slice: 0,
        };
        while let Some(i) = stack.pop() {
            let (z, y, x) = (i / (h * w), (i / w) % h, i % w);
            region.voxels += 1;
            region.first_slice = region.first_slice.min(z);
            region.last_slice = region.last_slice.max(z);
            for nz in z.saturating_sub(1)..=(z + 1).min(d - 1) {
                for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                    for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                        let j = (nz * h + ny) * w + nx;
                        if labels[j] == class && !seen[j] {
                            seen[j] = true;
                            stack.push(j);
                        }
                    }
                }
            }
        }
        out.push(region);
    }
    out
}
