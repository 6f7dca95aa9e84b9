//! Logits → binary mask → connected components → counts and centroids.

use std::path::Path;

use image::{ImageBuffer, Luma};
use serde::{Deserialize, Serialize};

use crate::dataset::Mask;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Connectivity {
    Four,
    Eight,
}

impl Connectivity {
    fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(-1, 0), (1, 0), (0, -1), (0, 1)],
            Connectivity::Eight => &[
                (-1, -1),
                (-1, 0),
                (-1, 1),
                (0, -1),
                (0, 1),
                (1, -1),
                (1, 0),
                (1, 1),
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PostprocConfig {
    pub threshold_prob: f64,
    pub min_area_px: usize,
    pub connectivity: Connectivity,
}

impl Default for PostprocConfig {
    fn default() -> Self {
        Self {
            threshold_prob: 0.5,
            min_area_px: 20,
            connectivity: Connectivity::Eight,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectStats {
    pub label: u32,
    pub area: usize,
    /// `(row, col)`, mean of member pixel coordinates.
    pub centroid: (f64, f64),
    pub equivalent_diameter: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledObjects {
    pub height: usize,
    pub width: usize,
    /// Row-major; 0 = background, `k` = object `k` (1-based).
    pub label_map: Vec<u32>,
    pub count: usize,
    pub objects: Vec<ObjectStats>,
}

impl LabeledObjects {
    pub fn centroids(&self) -> Vec<(f64, f64)> {
        self.objects.iter().map(|o| o.centroid).collect()
    }

    pub fn foreground(&self) -> usize {
        self.label_map.iter().filter(|l| **l != 0).count()
    }

    /// Writes the label map as a 16-bit grayscale PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        if self.count > u16::MAX as usize {
            return Err(Error::Config(format!(
                "{} objects do not fit a 16-bit label map",
                self.count
            )));
        }
        let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
            ImageBuffer::from_fn(self.width as u32, self.height as u32, |x, y| {
                Luma([self.label_map[y as usize * self.width + x as usize] as u16])
            });
        buf.save(path)
            .map_err(|e| Error::Decode(format!("{}: {e}", path.display())))
    }
}

/// `sigmoid(logit) > threshold_prob` per pixel.
pub fn binarize(logits: &[f32], height: usize, width: usize, threshold_prob: f64) -> Mask {
    debug_assert_eq!(logits.len(), height * width);
    let data = logits
        .iter()
        .map(|&z| u8::from(1.0 / (1.0 + (-(z as f64)).exp()) > threshold_prob))
        .collect();
    Mask {
        height,
        width,
        data,
    }
}

fn stats_from_labels(height: usize, width: usize, label_map: &[u32], count: usize) -> Vec<ObjectStats> {
    let mut area = vec![0usize; count];
    let mut sr = vec![0.0f64; count];
    let mut sc = vec![0.0f64; count];
    for (i, &l) in label_map.iter().enumerate() {
        if l == 0 {
            continue;
        }
        let k = l as usize - 1;
        area[k] += 1;
        sr[k] += (i / width) as f64;
        sc[k] += (i % width) as f64;
    }
    let _ = height;
    (0..count)
        .map(|k| ObjectStats {
            label: k as u32 + 1,
            area: area[k],
            centroid: (sr[k] / area[k] as f64, sc[k] / area[k] as f64),
            equivalent_diameter: (4.0 * area[k] as f64 / std::f64::consts::PI).sqrt(),
        })
        .collect()
}

/// Labels foreground components; labels follow raster order of each component's first pixel.
pub fn connected_components(mask: &Mask, connectivity: Connectivity) -> LabeledObjects {
    let (h, w) = (mask.height, mask.width);
    let mut labels = vec![0u32; h * w];
    let mut next = 0u32;
    let mut stack = Vec::new();
    for start in 0..h * w {
        if mask.data[start] == 0 || labels[start] != 0 {
            continue;
        }
        next += 1;
        labels[start] = next;
        stack.push(start);
        while let Some(i) = stack.pop() {
            let (r, c) = ((i / w) as isize, (i % w) as isize);
            for &(dr, dc) in connectivity.offsets() {
                let (nr, nc) = (r + dr, c + dc);
                if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                    continue;
                }
                let j = nr as usize * w + nc as usize;
                if mask.data[j] != 0 && labels[j] == 0 {
                    labels[j] = next;
                    stack.push(j);
                }
            }
        }
    }
    let count = next as usize;
    let objects = stats_from_labels(h, w, &labels, count);
    LabeledObjects {
        height: h,
        width: w,
        label_map: labels,
        count,
        objects,
    }
}

/// Drops components smaller than `min_area_px` and relabels the rest densely, keeping order.
pub fn filter_small(objects: &LabeledObjects, min_area_px: usize) -> LabeledObjects {
    let mut remap = vec![0u32; objects.count + 1];
    let mut next = 0u32;
    for o in &objects.objects {
        if o.area >= min_area_px {
            next += 1;
            remap[o.label as usize] = next;
        }
    }
    let label_map: Vec<u32> = objects.label_map.iter().map(|&l| remap[l as usize]).collect();
    let count = next as usize;
    let stats = stats_from_labels(objects.height, objects.width, &label_map, count);
    LabeledObjects {
        height: objects.height,
        width: objects.width,
        label_map,
        count,
        objects: stats,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CountResult {
    pub count: usize,
    pub centroids: Vec<(f64, f64)>,
    pub mask: Mask,
    pub objects: LabeledObjects,
}

/// Objects found in a binary mask under the post-processing rules.
pub fn objects_from_mask(mask: &Mask, cfg: &PostprocConfig) -> LabeledObjects {
    filter_small(&connected_components(mask, cfg.connectivity), cfg.min_area_px)
}

pub fn count_cells(logits: &[f32], height: usize, width: usize, cfg: &PostprocConfig) -> CountResult {
    let mask = binarize(logits, height, width, cfg.threshold_prob);
    let objects = objects_from_mask(&mask, cfg);
    CountResult {
        count: objects.count,
        centroids: objects.centroids(),
        mask,
        objects,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mask_from(rows: &[&str]) -> Mask {
        let h = rows.len();
        let w = rows[0].len();
        let data = rows
            .iter()
            .flat_map(|r| r.bytes().map(|b| u8::from(b == b'#')))
            .collect();
        Mask {
            height: h,
            width: w,
            data,
        }
    }

    #[test]
    fn zero_logit_is_background() {
        let m = binarize(&[0.0; 6], 2, 3, 0.5);
        assert_eq!(m.foreground(), 0);
        let m = binarize(&[40.0; 6], 2, 3, 0.5);
        assert_eq!(m.foreground(), 6);
    }

    #[test]
    fn binarize_matches_elementwise_oracle() {
        let logits: Vec<f32> = (0..50).map(|i| (i as f32 - 25.0) * 0.37).collect();
        let m = binarize(&logits, 5, 10, 0.7);
        for (z, v) in logits.iter().zip(&m.data) {
            let p = 1.0 / (1.0 + (-*z as f64).exp());
            assert_eq!(*v == 1, p > 0.7);
        }
    }

    #[test]
    fn diagonal_neighbours_depend_on_connectivity() {
        let m = mask_from(&["#..", ".#.", "..."]);
        assert_eq!(connected_components(&m, Connectivity::Eight).count, 1);
        assert_eq!(connected_components(&m, Connectivity::Four).count, 2);
        assert_eq!(connected_components(&Mask::zeros(4, 4), Connectivity::Eight).count, 0);
    }

    #[test]
    fn labels_follow_raster_order() {
        let m = mask_from(&["..#", "#..", "#.#"]);
        let o = connected_components(&m, Connectivity::Four);
        assert_eq!(o.count, 3);
        assert_eq!(o.label_map, vec![0, 0, 1, 2, 0, 0, 2, 0, 3]);
        assert_eq!(o.objects[1].centroid, (1.5, 0.0));
        assert_eq!(o.objects[1].area, 2);
    }

    #[test]
    fn filter_small_cases() {
        let single = mask_from(&["###..", "##...", "....."]);
        let o = connected_components(&single, Connectivity::Eight);
        assert_eq!(filter_small(&o, 0), o);
        assert_eq!(filter_small(&o, 20).count, 0);

        // Areas 5, 30, 19, 20 in separate rows.
        let mut m = Mask::zeros(9, 40);
        for (row, area) in [(0, 5), (2, 30), (4, 19), (6, 20)] {
            for c in 0..area {
                m.set(row, c, 1);
            }
        }
        let o = connected_components(&m, Connectivity::Eight);
        assert_eq!(o.count, 4);
        let f = filter_small(&o, 20);
        assert_eq!(f.count, 2);
        assert_eq!(f.objects.iter().map(|x| x.area).collect::<Vec<_>>(), vec![30, 20]);
        assert_eq!(f.foreground(), 50);
    }

    fn arb_mask() -> impl Strategy<Value = Mask> {
        (1usize..12, 1usize..12).prop_flat_map(|(h, w)| {
            proptest::collection::vec(prop_oneof![3 => Just(0u8), 2 => Just(1u8)], h * w)
                .prop_map(move |data| Mask { height: h, width: w, data })
        })
    }

    proptest! {
        #[test]
        fn component_invariants(m in arb_mask(), min_area in 0usize..6) {
            for conn in [Connectivity::Four, Connectivity::Eight] {
                let o = connected_components(&m, conn);
                prop_assert_eq!(o.count as u32, o.label_map.iter().copied().max().unwrap_or(0));
                prop_assert_eq!(o.objects.iter().map(|x| x.area).sum::<usize>(), m.foreground());
                prop_assert_eq!(o.count, connected_components(&m.transpose(), conn).count);
                let f = filter_small(&o, min_area);
                prop_assert_eq!(filter_small(&f, min_area), f.clone());
            }
        }
    }
}
