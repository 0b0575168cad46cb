//! Dataset-characteristic object size from labelled masks.
//!
//! Masks are binarized (any nonzero label is foreground, independent of the
//! class id), split into connected components, and each component contributes
//! the square root of its pixel area as its size. Per-image sizes are
//! averaged, then averaged again over all images that contain at least one
//! qualifying object.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Connectivity {
    Four,
    Eight,
}

impl std::fmt::Display for Connectivity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Connectivity::Four => write!(f, "4"),
            Connectivity::Eight => write!(f, "8"),
        }
    }
}

/// Per-pixel class ids, 0 = background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskImage {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<u8>,
}

impl MaskImage {
    pub fn new(width: usize, height: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != width * height {
            return Err(Error::BadOperand {
                op: "MaskImage::new",
                msg: format!(
                    "label buffer length {} != {width}x{height}",
                    labels.len()
                ),
            });
        }
        Ok(MaskImage {
            width,
            height,
            labels,
        })
    }

    pub fn filled(width: usize, height: usize, v: u8) -> Self {
        MaskImage {
            width,
            height,
            labels: vec![v; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.labels[y * self.width + x] = v;
    }

    pub fn foreground_count(&self) -> usize {
        self.labels.iter().filter(|&&v| v != 0).count()
    }
}

/// Foreground mask: 1 where the label is nonzero, irrespective of class.
pub fn binarize(mask: &MaskImage) -> MaskImage {
    MaskImage {
        width: mask.width,
        height: mask.height,
        labels: mask.labels.iter().map(|&v| u8::from(v != 0)).collect(),
    }
}

/// One connected foreground region.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Component {
    pub area: usize,
    /// (min_x, min_y, max_x, max_y), inclusive.
    pub bbox: (usize, usize, usize, usize),
}

struct UnionFind {
    parent: Vec<u32>,
}

impl UnionFind {
    fn new() -> Self {
        UnionFind { parent: Vec::new() }
    }

    fn make(&mut self) -> u32 {
        let id = self.parent.len() as u32;
        self.parent.push(id);
        id
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            // path halving
            let gp = self.parent[self.parent[x as usize] as usize];
            self.parent[x as usize] = gp;
            x = gp;
        }
        x
    }

    fn union(&mut self, a: u32, b: u32) {
        let ra = self.find(a);
        let rb = self.find(b);
        if ra != rb {
            // lower id wins: keeps labels in scan order
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi as usize] = lo;
        }
    }
}

/// Two-pass union-find labeling over the binarized mask. Components are
/// returned in first-pixel scan order.
pub fn connected_components(mask: &MaskImage, connectivity: Connectivity) -> Vec<Component> {
    let (w, h) = (mask.width, mask.height);
    let mut labels: Vec<u32> = vec![u32::MAX; w * h];
    let mut uf = UnionFind::new();

    for y in 0..h {
        for x in 0..w {
            if mask.labels[y * w + x] == 0 {
                continue;
            }
            // already-visited neighbours: W, and the previous row's NW/N/NE
            let mut neighbor: Option<u32> = None;
            let mut consider = |lbl: u32, uf: &mut UnionFind| match neighbor {
                None => neighbor = Some(lbl),
                Some(n) => uf.union(n, lbl),
            };
            if x > 0 && labels[y * w + x - 1] != u32::MAX {
                consider(labels[y * w + x - 1], &mut uf);
            }
            if y > 0 {
                if labels[(y - 1) * w + x] != u32::MAX {
                    consider(labels[(y - 1) * w + x], &mut uf);
                }
                if connectivity == Connectivity::Eight {
                    if x > 0 && labels[(y - 1) * w + x - 1] != u32::MAX {
                        consider(labels[(y - 1) * w + x - 1], &mut uf);
                    }
                    if x + 1 < w && labels[(y - 1) * w + x + 1] != u32::MAX {
                        consider(labels[(y - 1) * w + x + 1], &mut uf);
                    }
                }
            }
            labels[y * w + x] = match neighbor {
                Some(n) => n,
                None => uf.make(),
            };
        }
    }

    // Second pass: resolve roots, accumulate areas and boxes in scan order.
    let mut order: Vec<u32> = Vec::new();
    let mut index_of: Vec<Option<usize>> = vec![None; uf.parent.len()];
    let mut comps: Vec<Component> = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let l = labels[y * w + x];
            if l == u32::MAX {
                continue;
            }
            let root = uf.find(l);
            let idx = match index_of[root as usize] {
                Some(i) => i,
                None => {
                    let i = comps.len();
                    index_of[root as usize] = Some(i);
                    order.push(root);
                    comps.push(Component {
                        area: 0,
                        bbox: (x, y, x, y),
                    });
                    i
                }
            };
            let c = &mut comps[idx];
            c.area += 1;
            c.bbox.0 = c.bbox.0.min(x);
            c.bbox.1 = c.bbox.1.min(y);
            c.bbox.2 = c.bbox.2.max(x);
            c.bbox.3 = c.bbox.3.max(y);
        }
    }
    comps
}

/// The dataset-characteristic object size and its provenance.
#[derive(Clone, Debug)]
pub struct ObjEstimate {
    /// Mean over contributing images of the per-image mean sqrt(area).
    pub obj: f64,
    /// Per-image mean sizes, one entry per contributing image.
    pub per_image_means: Vec<f64>,
    /// Number of contributing images g (those with >= 1 qualifying object).
    pub num_images: usize,
    pub num_objects: usize,
    pub connectivity: Connectivity,
    pub min_area: usize,
}

pub const DEFAULT_MIN_AREA: usize = 4;

/// Estimate Obj over a mask set: o = sqrt(pixel area) per component of at
/// least `min_area` pixels, averaged per image, then averaged over the g
/// images that contain any qualifying component. Images without one are
/// excluded from the average rather than contributing zero.
pub fn estimate_obj(
    masks: &[MaskImage],
    connectivity: Connectivity,
    min_area: usize,
) -> Result<ObjEstimate> {
    let mut per_image_means = Vec::new();
    let mut num_objects = 0;
    for mask in masks {
        let bin = binarize(mask);
        let comps = connected_components(&bin, connectivity);
        let sizes: Vec<f64> = comps
            .iter()
            .filter(|c| c.area >= min_area)
            .map(|c| (c.area as f64).sqrt())
            .collect();
        if sizes.is_empty() {
            continue;
        }
        num_objects += sizes.len();
        per_image_means.push(sizes.iter().sum::<f64>() / sizes.len() as f64);
    }
    if per_image_means.is_empty() {
        return Err(Error::EmptyDataset { min_area });
    }
    let obj = per_image_means.iter().sum::<f64>() / per_image_means.len() as f64;
    Ok(ObjEstimate {
        obj,
        num_images: per_image_means.len(),
        per_image_means,
        num_objects,
        connectivity,
        min_area,
    })
}

#[cfg(test)]
#[path = "objsize_tests.rs"]
mod tests;
