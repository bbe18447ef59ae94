//! Feature maps, the toy convolutional backbone, and RoI-Align pooling.

use ndarray::{Array1, Array3, Array4};
use rand_chacha::ChaCha12Rng;

use crate::detector::bbox::BBox;
use crate::error::{BlcError, Result};
use crate::util::{rng, uniform_matrix};

/// Channels × height × width feature tensor with its pixel stride.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub data: Array3<f64>,
    pub stride: f64,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    /// Image extent covered by the map, in pixels.
    pub fn image_size(&self) -> (f64, f64) {
        (
            self.width() as f64 * self.stride,
            self.height() as f64 * self.stride,
        )
    }
}

/// Input to the backbone: raw pixels, or a dataset-provided feature map
/// (oracle-features mode) passed through verbatim.
#[derive(Debug, Clone, PartialEq)]
pub enum ImageData {
    Pixels(Array3<f64>),
    OracleFeatures(FeatureMap),
}

/// One 3×3 convolution layer with ReLU.
#[derive(Debug, Clone)]
struct ConvLayer {
    /// out_ch × in_ch × 3 × 3
    weight: Array4<f64>,
    bias: Array1<f64>,
    stride: usize,
}

impl ConvLayer {
    fn seeded(r: &mut ChaCha12Rng, in_ch: usize, out_ch: usize, stride: usize) -> Self {
        let fan_in = (in_ch * 9) as f64;
        let scale = 1.0 / fan_in.sqrt();
        let flat = uniform_matrix(r, out_ch, in_ch * 9, scale);
        let weight = Array4::from_shape_fn((out_ch, in_ch, 3, 3), |(o, i, ky, kx)| {
            flat[[o, i * 9 + ky * 3 + kx]]
        });
        Self {
            weight,
            bias: Array1::zeros(out_ch),
            stride,
        }
    }

    /// Padding 1, ReLU activation.
    fn forward(&self, input: &Array3<f64>) -> Array3<f64> {
        let (in_ch, h, w) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let out_ch = self.weight.shape()[0];
        let oh = h.div_ceil(self.stride);
        let ow = w.div_ceil(self.stride);
        let mut out = Array3::<f64>::zeros((out_ch, oh, ow));
        for o in 0..out_ch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let cy = (oy * self.stride) as isize;
                    let cx = (ox * self.stride) as isize;
                    let mut acc = self.bias[o];
                    for i in 0..in_ch {
                        for ky in -1isize..=1 {
                            for kx in -1isize..=1 {
                                let y = cy + ky;
                                let x = cx + kx;
                                if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
                                    acc += self.weight[[o, i, (ky + 1) as usize, (kx + 1) as usize]]
                                        * input[[i, y as usize, x as usize]];
                                }
                            }
                        }
                    }
                    out[[o, oy, ox]] = acc.max(0.0);
                }
            }
        }
        out
    }
}

/// Small fixed convolutional stack standing in for a full backbone: four
/// 3×3 conv blocks, two of them strided, single-scale output. Weights are
/// seeded once and never trained; in oracle-features mode it is bypassed.
#[derive(Debug, Clone)]
pub struct ToyBackbone {
    layers: Vec<ConvLayer>,
    stride: usize,
}

impl ToyBackbone {
    pub const MIN_IMAGE_SIDE: usize = 32;

    pub fn new(in_channels: usize, out_channels: usize, seed: u64) -> Self {
        let mut r = rng(seed);
        let layers = vec![
            ConvLayer::seeded(&mut r, in_channels, 8, 2),
            ConvLayer::seeded(&mut r, 8, 16, 2),
            ConvLayer::seeded(&mut r, 16, out_channels, 1),
            ConvLayer::seeded(&mut r, out_channels, out_channels, 1),
        ];
        Self { layers, stride: 4 }
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    /// Runs the conv stack on pixels, or returns the oracle map verbatim.
    pub fn forward(&self, image: &ImageData) -> Result<FeatureMap> {
        match image {
            ImageData::OracleFeatures(map) => Ok(map.clone()),
            ImageData::Pixels(px) => {
                let (h, w) = (px.shape()[1], px.shape()[2]);
                if h < Self::MIN_IMAGE_SIDE || w < Self::MIN_IMAGE_SIDE {
                    return Err(BlcError::InvalidConfig(format!(
                        "image {w}x{h} below minimum {0}x{0}",
                        Self::MIN_IMAGE_SIDE
                    )));
                }
                let mut cur = px.clone();
                for layer in &self.layers {
                    cur = layer.forward(&cur);
                }
                Ok(FeatureMap {
                    data: cur,
                    stride: self.stride as f64,
                })
            }
        }
    }
}

/// RoI-Align-style pooling: an `out×out` grid of bilinear samples (one per
/// bin, taken at the bin center, no coordinate quantization), flattened
/// channel-major to a vector of length `channels·out²`. Sample coordinates
/// are mapped to cell-center space (`x/stride - 0.5`) and clamped at the
/// border.
pub fn roi_pool(feat: &FeatureMap, roi: &BBox, out_size: usize) -> Result<Array1<f64>> {
    let (img_w, img_h) = feat.image_size();
    if !roi.is_valid() {
        return Err(BlcError::InvalidBox {
            x1: roi.x1,
            y1: roi.y1,
            x2: roi.x2,
            y2: roi.y2,
        });
    }
    if roi.x2 <= 0.0 || roi.y2 <= 0.0 || roi.x1 >= img_w || roi.y1 >= img_h {
        return Err(BlcError::InvalidBox {
            x1: roi.x1,
            y1: roi.y1,
            x2: roi.x2,
            y2: roi.y2,
        });
    }
    let c = feat.channels();
    let (h, w) = (feat.height(), feat.width());
    let bin_w = roi.width() / out_size as f64;
    let bin_h = roi.height() / out_size as f64;
    let mut out = Array1::<f64>::zeros(c * out_size * out_size);
    for by in 0..out_size {
        for bx in 0..out_size {
            let px = roi.x1 + (bx as f64 + 0.5) * bin_w;
            let py = roi.y1 + (by as f64 + 0.5) * bin_h;
            // continuous cell coordinates
            let u = (px / feat.stride - 0.5).clamp(0.0, (w - 1) as f64);
            let v = (py / feat.stride - 0.5).clamp(0.0, (h - 1) as f64);
            let x0 = u.floor() as usize;
            let y0 = v.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fx = u - x0 as f64;
            let fy = v - y0 as f64;
            for ch in 0..c {
                let tl = feat.data[[ch, y0, x0]];
                let tr = feat.data[[ch, y0, x1]];
                let bl = feat.data[[ch, y1, x0]];
                let br = feat.data[[ch, y1, x1]];
                let top = tl + (tr - tl) * fx;
                let bottom = bl + (br - bl) * fx;
                out[ch * out_size * out_size + by * out_size + bx] = top + (bottom - top) * fy;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array3;

    fn constant_map(c: usize, h: usize, w: usize, value: f64, stride: f64) -> FeatureMap {
        FeatureMap {
            data: Array3::from_elem((c, h, w), value),
            stride,
        }
    }

    #[test]
    fn constant_field_pools_to_constant() {
        let feat = constant_map(3, 8, 8, 2.5, 4.0);
        let roi = BBox::new(3.0, 3.0, 21.0, 17.0).unwrap();
        let pooled = roi_pool(&feat, &roi, 2).unwrap();
        assert_eq!(pooled.len(), 12);
        for v in pooled.iter() {
            assert_abs_diff_eq!(*v, 2.5, epsilon = 1e-12);
        }
    }

    #[test]
    fn single_cell_roi_returns_cell_value() {
        let mut feat = constant_map(1, 8, 8, 0.0, 4.0);
        feat.data[[0, 2, 3]] = 7.0;
        // roi exactly covering cell (row 2, col 3): pixels [12,16)×[8,12)
        let roi = BBox::new(12.0, 8.0, 16.0, 12.0).unwrap();
        let pooled = roi_pool(&feat, &roi, 1).unwrap();
        assert_abs_diff_eq!(pooled[0], 7.0, epsilon = 1e-12);
    }

    #[test]
    fn matches_dense_bilinear_oracle() {
        let mut r = crate::util::rng(41);
        let c = 2;
        let data = Array3::from_shape_fn((c, 6, 6), |_| {
            use rand::Rng;
            r.random_range(-1.0..1.0)
        });
        let feat = FeatureMap {
            data: data.clone(),
            stride: 4.0,
        };
        let roi = BBox::new(2.0, 3.0, 19.0, 15.0).unwrap();
        let out_size = 3;
        let pooled = roi_pool(&feat, &roi, out_size).unwrap();

        // direct interpolation oracle, scalar arithmetic only
        let bw = roi.width() / out_size as f64;
        let bh = roi.height() / out_size as f64;
        for ch in 0..c {
            for by in 0..out_size {
                for bx in 0..out_size {
                    let px = roi.x1 + (bx as f64 + 0.5) * bw;
                    let py = roi.y1 + (by as f64 + 0.5) * bh;
                    let u = (px / 4.0 - 0.5).clamp(0.0, 5.0);
                    let v = (py / 4.0 - 0.5).clamp(0.0, 5.0);
                    let (x0, y0) = (u.floor() as usize, v.floor() as usize);
                    let (x1, y1) = ((x0 + 1).min(5), (y0 + 1).min(5));
                    let (fx, fy) = (u - x0 as f64, v - y0 as f64);
                    let expect = data[[ch, y0, x0]] * (1.0 - fx) * (1.0 - fy)
                        + data[[ch, y0, x1]] * fx * (1.0 - fy)
                        + data[[ch, y1, x0]] * (1.0 - fx) * fy
                        + data[[ch, y1, x1]] * fx * fy;
                    assert_abs_diff_eq!(
                        pooled[ch * 9 + by * out_size + bx],
                        expect,
                        epsilon = 1e-12
                    );
                }
            }
        }
    }

    #[test]
    fn roi_outside_image_errors() {
        let feat = constant_map(1, 8, 8, 1.0, 4.0);
        let roi = BBox::new(40.0, 40.0, 50.0, 50.0).unwrap();
        assert!(roi_pool(&feat, &roi, 2).is_err());
    }

    #[test]
    fn backbone_is_deterministic() {
        let backbone = ToyBackbone::new(3, 12, 99);
        let image = Array3::from_shape_fn((3, 64, 64), |(c, y, x)| {
            ((c + 1) * (y + 1) * (x + 3)) as f64 % 7.0 / 7.0
        });
        let a = backbone.forward(&ImageData::Pixels(image.clone())).unwrap();
        let b = backbone.forward(&ImageData::Pixels(image)).unwrap();
        assert_eq!(a.data, b.data);
        assert_eq!(a.stride, 4.0);
        assert_eq!(a.channels(), 12);
        assert_eq!(a.height(), 16);
    }

    #[test]
    fn undersized_image_errors() {
        let backbone = ToyBackbone::new(3, 8, 1);
        let image = Array3::zeros((3, 16, 16));
        assert!(backbone.forward(&ImageData::Pixels(image)).is_err());
    }

    #[test]
    fn oracle_mode_passes_map_through() {
        let backbone = ToyBackbone::new(3, 8, 1);
        let map = constant_map(8, 16, 16, 0.25, 4.0);
        let out = backbone
            .forward(&ImageData::OracleFeatures(map.clone()))
            .unwrap();
        assert_eq!(out, map);
    }
}
