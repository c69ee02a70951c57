//! Semantic correspondences read off cross-image attention.

use image::{Rgb, RgbImage};
use ndarray::{Array2, ArrayView2, Zip};

use crate::attention::AttentionMap;
use crate::error::{Error, Result};

/// A match counts as low-confidence when its weight is below this multiple
/// of the uniform weight `1 / num_keys`.
pub const LOW_CONFIDENCE_FACTOR: f32 = 2.0;

/// Which captured maps feed the argmax.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Aggregation {
    SingleLayer(usize),
    /// Element-wise mean of the selected maps.
    MeanOverSelected(Vec<usize>),
}

/// For every structure (query) pixel, the appearance (key) pixel it attends
/// to most.
#[derive(Debug, Clone, PartialEq)]
pub struct CorrespondenceMap {
    /// `(row, col)` into the appearance grid.
    pub mapping: Array2<(usize, usize)>,
    /// Winning attention weight.
    pub confidence: Array2<f32>,
    pub low_confidence: Array2<bool>,
    pub key_grid: (usize, usize),
}

impl CorrespondenceMap {
    /// Flat appearance index per structure pixel, row-major.
    pub fn flat_indices(&self) -> Vec<usize> {
        self.mapping
            .iter()
            .map(|&(r, c)| r * self.key_grid.1 + c)
            .collect()
    }

    /// Fraction of pixels whose match equals `expected[flat query index]`.
    pub fn agreement(&self, expected: &[usize]) -> f64 {
        let got = self.flat_indices();
        let hits = got.iter().zip(expected).filter(|(a, b)| a == b).count();
        hits as f64 / got.len().max(1) as f64
    }
}

/// Index and value of the row maximum; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> (usize, f32) {
    let mut best = (0, row[0]);
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (j, v);
        }
    }
    best
}

pub fn aggregate(maps: &[AttentionMap], aggregation: &Aggregation) -> Result<AttentionMap> {
    if maps.is_empty() {
        return Err(Error::config("no attention maps captured"));
    }
    let pick = |i: usize| {
        maps.get(i)
            .ok_or_else(|| Error::config(format!("map index {i} out of range 0..{}", maps.len())))
    };
    match aggregation {
        Aggregation::SingleLayer(i) => Ok(pick(*i)?.clone()),
        Aggregation::MeanOverSelected(ids) => {
            if ids.is_empty() {
                return Err(Error::config("no maps selected"));
            }
            let first = pick(ids[0])?;
            let mut acc = first.weights.mapv(f64::from);
            for &i in &ids[1..] {
                let m = pick(i)?;
                if m.weights.dim() != first.weights.dim() {
                    return Err(Error::shape(format!(
                        "maps of shape {:?} and {:?} cannot be averaged",
                        first.weights.dim(),
                        m.weights.dim()
                    )));
                }
                Zip::from(&mut acc).and(&m.weights).for_each(|a, &w| *a += w as f64);
            }
            let n = ids.len() as f64;
            Ok(AttentionMap {
                weights: acc.mapv(|v| (v / n) as f32),
            })
        }
    }
}

fn check_grid(n: usize, grid: (usize, usize), what: &str) -> Result<()> {
    if grid.0 * grid.1 != n {
        return Err(Error::shape(format!(
            "{what} grid {}×{} does not hold {n} tokens",
            grid.0, grid.1
        )));
    }
    Ok(())
}

fn from_winners(
    winners: impl Iterator<Item = (usize, f32)>,
    query_grid: (usize, usize),
    key_grid: (usize, usize),
) -> CorrespondenceMap {
    let num_keys = key_grid.0 * key_grid.1;
    let threshold = LOW_CONFIDENCE_FACTOR / num_keys as f32;
    let mut mapping = Array2::from_elem(query_grid, (0, 0));
    let mut confidence = Array2::zeros(query_grid);
    let mut low = Array2::from_elem(query_grid, false);
    for (i, (j, w)) in winners.enumerate() {
        let q = (i / query_grid.1, i % query_grid.1);
        mapping[q] = (j / key_grid.1, j % key_grid.1);
        confidence[q] = w;
        low[q] = w < threshold;
    }
    CorrespondenceMap {
        mapping,
        confidence,
        low_confidence: low,
        key_grid,
    }
}

/// Argmax of the aggregated map per query pixel.
pub fn extract_correspondences(
    maps: &[AttentionMap],
    aggregation: &Aggregation,
    query_grid: (usize, usize),
    key_grid: (usize, usize),
) -> Result<CorrespondenceMap> {
    let map = aggregate(maps, aggregation)?;
    check_grid(map.num_queries(), query_grid, "query")?;
    check_grid(map.num_keys(), key_grid, "key")?;
    let winners = map
        .weights
        .rows()
        .into_iter()
        .map(|row| argmax(row.as_slice().expect("standard layout")))
        .collect::<Vec<_>>();
    Ok(from_winners(winners.into_iter(), query_grid, key_grid))
}

/// Same result as building the softmax map and taking its argmax, without
/// materializing the map: the winner is the largest logit and its weight is
/// `1 / Σ_j exp(l_j − l_max)`.
pub fn correspondences_from_features(
    queries: ArrayView2<f32>,
    keys: ArrayView2<f32>,
    scale: f32,
    query_grid: (usize, usize),
    key_grid: (usize, usize),
) -> Result<CorrespondenceMap> {
    if queries.ncols() != keys.ncols() {
        return Err(Error::shape(format!(
            "query width {} != key width {}",
            queries.ncols(),
            keys.ncols()
        )));
    }
    check_grid(queries.nrows(), query_grid, "query")?;
    check_grid(keys.nrows(), key_grid, "key")?;
    let logits = queries.dot(&keys.t()) * scale;
    let winners = logits.rows().into_iter().map(|row| {
        let row = row.as_slice().expect("standard layout");
        let (j, max) = argmax(row);
        let z: f64 = row.iter().map(|&l| ((l - max) as f64).exp()).sum();
        (j, (1.0 / z) as f32)
    });
    Ok(from_winners(winners, query_grid, key_grid))
}

/// Colormap whose red channel follows the column and green the row, so any
/// gather from it shows where pixels came from.
pub fn default_colormap(height: usize, width: usize) -> RgbImage {
    let ramp = |i: usize, n: usize| {
        if n <= 1 {
            128
        } else {
            (i * 255 / (n - 1)) as u8
        }
    };
    RgbImage::from_fn(width as u32, height as u32, |x, y| {
        let (r, g) = (ramp(x as usize, width), ramp(y as usize, height));
        Rgb([r, g, 255 - r / 2 - g / 2])
    })
}

/// Paints every structure pixel with the colormap color of its match.
/// With `gray_low_confidence`, unreliable matches are drawn mid-gray.
pub fn render_correspondence(
    map: &CorrespondenceMap,
    colormap: &RgbImage,
    gray_low_confidence: bool,
) -> Result<RgbImage> {
    let (kh, kw) = map.key_grid;
    if colormap.dimensions() != (kw as u32, kh as u32) {
        return Err(Error::shape(format!(
            "colormap is {}×{}, appearance grid is {kw}×{kh}",
            colormap.width(),
            colormap.height()
        )));
    }
    let (h, w) = map.mapping.dim();
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let q = (y as usize, x as usize);
        if gray_low_confidence && map.low_confidence[q] {
            return Rgb([128, 128, 128]);
        }
        let (r, c) = map.mapping[q];
        *colormap.get_pixel(c as u32, r as u32)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::compute_attention_map;
    use ndarray::Array2;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn identity_map_gives_identity() {
        let m = AttentionMap {
            weights: Array2::eye(6),
        };
        let c = extract_correspondences(&[m], &Aggregation::SingleLayer(0), (2, 3), (2, 3)).unwrap();
        assert_eq!(c.flat_indices(), (0..6).collect::<Vec<_>>());
        assert!(c.confidence.iter().all(|&v| v == 1.0));
        assert!(!c.low_confidence.iter().any(|&b| b));
    }

    #[test]
    fn uniform_rows_fall_back_to_zero() {
        let m = AttentionMap {
            weights: Array2::from_elem((4, 4), 0.25),
        };
        let c = extract_correspondences(&[m], &Aggregation::SingleLayer(0), (2, 2), (2, 2)).unwrap();
        assert!(c.mapping.iter().all(|&p| p == (0, 0)));
        assert!(c.confidence.iter().all(|&v| v == 0.25));
        assert!(c.low_confidence.iter().all(|&b| b));
    }

    #[test]
    fn permuted_features_recover_permutation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, d) = (16 * 16, 16);
        let mut f = Array2::<f32>::from_shape_simple_fn((n, d), || StandardNormal.sample(&mut rng));
        for mut row in f.rows_mut() {
            let norm = row.dot(&row).sqrt();
            row.mapv_inplace(|v| 4.0 * v / norm);
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut rng);
        let mut keys = Array2::zeros((n, d));
        for (i, &p) in perm.iter().enumerate() {
            keys.row_mut(p).assign(&f.row(i));
        }
        let fast = correspondences_from_features(f.view(), keys.view(), 1.0, (16, 16), (16, 16)).unwrap();
        let map = compute_attention_map(f.view(), keys.view(), 1.0).unwrap();
        let slow = extract_correspondences(&[map], &Aggregation::SingleLayer(0), (16, 16), (16, 16)).unwrap();
        assert_eq!(fast.mapping, slow.mapping);
        assert!(fast.agreement(&perm) >= 0.95);
    }

    #[test]
    fn mean_aggregation_and_errors() {
        let a = AttentionMap {
            weights: Array2::from_shape_vec((1, 2), vec![0.6, 0.4]).unwrap(),
        };
        let b = AttentionMap {
            weights: Array2::from_shape_vec((1, 2), vec![0.0, 1.0]).unwrap(),
        };
        let m = aggregate(&[a.clone(), b.clone()], &Aggregation::MeanOverSelected(vec![0, 1])).unwrap();
        assert_eq!(m.weights.row(0).to_vec(), vec![0.3, 0.7]);
        assert!(aggregate(&[], &Aggregation::SingleLayer(0)).is_err());
        assert!(aggregate(std::slice::from_ref(&a), &Aggregation::SingleLayer(1)).is_err());
        assert!(extract_correspondences(&[a], &Aggregation::SingleLayer(0), (1, 1), (3, 1)).is_err());
    }

    #[test]
    fn rendering_gathers_colors() {
        let cmap = default_colormap(2, 3);
        let eye = AttentionMap {
            weights: Array2::eye(6),
        };
        let id = extract_correspondences(&[eye], &Aggregation::SingleLayer(0), (2, 3), (2, 3)).unwrap();
        assert_eq!(render_correspondence(&id, &cmap, true).unwrap(), cmap);

        let mut w = Array2::zeros((6, 6));
        for i in 0..6 {
            w[[i, 5 - i]] = 1.0;
        }
        let rev = extract_correspondences(&[AttentionMap { weights: w }], &Aggregation::SingleLayer(0), (2, 3), (2, 3)).unwrap();
        let out = render_correspondence(&rev, &cmap, false).unwrap();
        assert_eq!(out.get_pixel(0, 0), cmap.get_pixel(2, 1));

        let flat = AttentionMap {
            weights: Array2::from_elem((6, 6), 1.0 / 6.0),
        };
        let low = extract_correspondences(&[flat], &Aggregation::SingleLayer(0), (2, 3), (2, 3)).unwrap();
        let gray = render_correspondence(&low, &cmap, true).unwrap();
        assert!(gray.pixels().all(|p| p.0 == [128, 128, 128]));
        assert!(render_correspondence(&low, &default_colormap(3, 3), true).is_err());
    }
}
