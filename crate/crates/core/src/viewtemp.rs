//! Image backbone adapter and the scale-adaptive multi-view temporal interaction.
//!
//! Per view, every frame of the window is convolved with a view-specific set of
//! kernel sizes. For each scale, the current frame attends over the same spatial
//! location in the `l` frames of the window (location-consistent temporal
//! cross-attention), and the per-scale results are merged by a position-wise MLP.
//! All feature maps are channels-last `[h, w, D]`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::{Graph, Var};
use crate::nn::{Linear, Mlp2};
use crate::params::{Init, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ViewTempError {
    #[error("kernel size {0} is even; only odd sizes support symmetric padding")]
    EvenKernel(usize),
    #[error("view {0} has an empty kernel set")]
    EmptyKernelSet(String),
    #[error("image {h}x{w} is not divisible by backbone stride {stride}")]
    Resolution { h: usize, w: usize, stride: usize },
    #[error("view {view} has {got} frames, expected {expected}")]
    FrameCount {
        view: String,
        got: usize,
        expected: usize,
    },
    #[error("frame shape mismatch in window: {0:?} vs {1:?}")]
    Shape(Vec<usize>, Vec<usize>),
    #[error("unsupported backbone {0:?}")]
    Backbone(String),
    #[error("no kernel set configured for view {0}")]
    MissingView(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewKernelSet {
    pub view_id: String,
    pub kernel_sizes: Vec<usize>,
}

impl ViewKernelSet {
    pub fn new(view_id: impl Into<String>, kernel_sizes: Vec<usize>) -> Result<Self, ViewTempError> {
        let s = Self {
            view_id: view_id.into(),
            kernel_sizes,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), ViewTempError> {
        if self.kernel_sizes.is_empty() {
            return Err(ViewTempError::EmptyKernelSet(self.view_id.clone()));
        }
        if let Some(&k) = self.kernel_sizes.iter().find(|k| **k % 2 == 0) {
            return Err(ViewTempError::EvenKernel(k));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub name: String,
    /// Feature stride is `2^stage`.
    pub stage: u32,
    pub hidden: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            name: "patch".into(),
            stage: 4,
            hidden: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ViewTempConfig {
    pub enabled: bool,
    pub kernels: BTreeMap<String, Vec<usize>>,
    pub heads: usize,
    /// One query/key/value projection shared by all scales instead of one per scale.
    pub shared_qkv: bool,
}

impl Default for ViewTempConfig {
    fn default() -> Self {
        let mut kernels = BTreeMap::new();
        kernels.insert("view1".to_string(), vec![1, 3, 5, 7]);
        kernels.insert("view6".to_string(), vec![3, 5, 7, 9]);
        Self {
            enabled: true,
            kernels,
            heads: 4,
            shared_qkv: false,
        }
    }
}

/// Per-view sequence of `l` feature maps in temporal order (oldest first).
#[derive(Clone, Debug)]
pub struct TemporalFeatureBlock {
    pub view_id: String,
    pub frames: Vec<Var>,
    pub h: usize,
    pub w: usize,
}

impl TemporalFeatureBlock {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn current(&self) -> Var {
        *self.frames.last().expect("empty temporal block")
    }
}

/// Non-overlapping patch embedding with stride `2^stage`, followed by a
/// projection to the model width (the 1x1 channel projection).
#[derive(Clone, Debug)]
pub struct PatchBackbone {
    pub stride: usize,
    embed: Linear,
    proj: Linear,
}

impl PatchBackbone {
    pub fn new(store: &mut ParamStore, init: &mut Init, cfg: &BackboneConfig, dim: usize) -> Result<Self, ViewTempError> {
        if cfg.name != "patch" {
            return Err(ViewTempError::Backbone(cfg.name.clone()));
        }
        let stride = 1usize << cfg.stage;
        Ok(Self {
            stride,
            embed: Linear::new(store, init, "backbone.embed", 3 * stride * stride, cfg.hidden, true),
            proj: Linear::new(store, init, "backbone.proj", cfg.hidden, dim, true),
        })
    }

    /// Pixel patches of an `[H, W, 3]` image in `[0, 1]` as `[h*w, 3*s*s]`, normalised.
    fn patchify(&self, img: &Tensor) -> Result<(Vec<f64>, usize, usize), ViewTempError> {
        let s = img.shape();
        let (hh, ww) = (s[0], s[1]);
        let st = self.stride;
        if hh % st != 0 || ww % st != 0 {
            return Err(ViewTempError::Resolution { h: hh, w: ww, stride: st });
        }
        let (h, w) = (hh / st, ww / st);
        let d = img.data();
        let mut out = Vec::with_capacity(hh * ww * 3);
        for i in 0..h {
            for j in 0..w {
                for y in 0..st {
                    let row = ((i * st + y) * ww + j * st) * 3;
                    out.extend(d[row..row + st * 3].iter().map(|v| (v - 0.5) * 4.0));
                }
            }
        }
        Ok((out, h, w))
    }

    /// Feature blocks for every view; all views must have the same number of frames.
    pub fn extract_features(
        &self,
        g: &mut Graph,
        images: &[(String, Vec<Tensor>)],
    ) -> Result<Vec<TemporalFeatureBlock>, ViewTempError> {
        let expected = images.first().map_or(0, |(_, f)| f.len());
        let mut all = Vec::new();
        let mut layout = Vec::new();
        let (mut fh, mut fw) = (0, 0);
        for (view, frames) in images {
            if frames.len() != expected {
                return Err(ViewTempError::FrameCount {
                    view: view.clone(),
                    got: frames.len(),
                    expected,
                });
            }
            for f in frames {
                let (p, h, w) = self.patchify(f)?;
                if !all.is_empty() && (h, w) != (fh, fw) {
                    return Err(ViewTempError::Shape(vec![fh, fw], vec![h, w]));
                }
                fh = h;
                fw = w;
                all.extend(p);
            }
            layout.push((view.clone(), frames.len()));
        }
        let total: usize = layout.iter().map(|(_, n)| n).sum();
        let in_dim = 3 * self.stride * self.stride;
        let x = g.constant(Tensor::new(&[total * fh * fw, in_dim], all));
        let e = self.embed.forward(g, x);
        let e = g.relu(e);
        let feats = self.proj.forward(g, e);
        let dim = self.proj.out_dim;
        let mut blocks = Vec::new();
        let mut offset = 0;
        for (view, n) in layout {
            let frames = (0..n)
                .map(|k| {
                    let rows = g.slice(feats, 0, (offset + k) * fh * fw, fh * fw);
                    g.reshape(rows, &[fh, fw, dim])
                })
                .collect();
            offset += n;
            blocks.push(TemporalFeatureBlock {
                view_id: view,
                frames,
                h: fh,
                w: fw,
            });
        }
        Ok(blocks)
    }
}

/// One depthwise `k x k` convolution plus pointwise projection per kernel size.
#[derive(Clone, Debug)]
pub struct MultiScaleConv {
    pub kernels: ViewKernelSet,
    pub depthwise: Vec<ParamId>,
    pub pointwise: Vec<Linear>,
}

impl MultiScaleConv {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, kernels: ViewKernelSet, dim: usize) -> Result<Self, ViewTempError> {
        kernels.validate()?;
        let mut depthwise = Vec::new();
        let mut pointwise = Vec::new();
        for (i, &k) in kernels.kernel_sizes.iter().enumerate() {
            depthwise.push(store.add(
                format!("{name}.scale{i}.depthwise"),
                init.xavier(&[k, k, dim], k * k, k * k),
            ));
            pointwise.push(Linear::new(store, init, &format!("{name}.scale{i}.pointwise"), dim, dim, true));
        }
        Ok(Self {
            kernels,
            depthwise,
            pointwise,
        })
    }

    /// `N` maps with the shape of `f` (`[h, w, D]`).
    pub fn forward(&self, g: &mut Graph, f: Var) -> Vec<Var> {
        self.depthwise
            .iter()
            .zip(&self.pointwise)
            .map(|(&dw, pw)| {
                let w = g.param(dw);
                let c = g.depthwise_conv(f, w);
                pw.forward(g, c)
            })
            .collect()
    }
}

/// Cross-attention from each location of the current frame to the same
/// location across the `l` frames of the window.
#[derive(Clone, Debug)]
pub struct LocalTemporalAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub out: Linear,
    /// Learned per-offset embedding added to the keys, `[l, D]` (zero at init).
    pub offset_embed: ParamId,
    pub heads: usize,
    pub dim: usize,
}

impl LocalTemporalAttention {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, dim: usize, heads: usize, window: usize) -> Self {
        assert!(dim % heads == 0, "dim {dim} not divisible by {heads} heads");
        Self {
            q: Linear::new(store, init, &format!("{name}.q"), dim, dim, true),
            k: Linear::new(store, init, &format!("{name}.k"), dim, dim, true),
            v: Linear::new(store, init, &format!("{name}.v"), dim, dim, true),
            out: Linear::new(store, init, &format!("{name}.out"), dim, dim, true),
            offset_embed: store.add(format!("{name}.offset_embed"), Tensor::zeros(&[window, dim])),
            heads,
            dim,
        }
    }

    /// Returns the output map `[h, w, D]` and attention weights `[h*w*heads, 1, l]`.
    ///
    /// `window` holds the `l` maps in temporal order, the query frame last.
    pub fn forward(&self, g: &mut Graph, query_frame: Var, window: &[Var]) -> Result<(Var, Var), ViewTempError> {
        let shape = g.shape(query_frame).to_vec();
        for &f in window {
            if g.shape(f) != shape.as_slice() {
                return Err(ViewTempError::Shape(shape.clone(), g.shape(f).to_vec()));
            }
        }
        let l = window.len();
        let (h, w, d) = (shape[0], shape[1], shape[2]);
        let p = h * w;
        let heads = self.heads;
        let dh = d / heads;
        let offsets = g.param(self.offset_embed);
        assert!(
            l <= g.shape(offsets)[0],
            "window of {l} frames exceeds configured length {}",
            g.shape(offsets)[0]
        );
        let qf = g.reshape(query_frame, &[p, d]);
        let q = self.q.forward(g, qf);
        let q = g.reshape(q, &[p * heads, 1, dh]);
        let mut ks = Vec::with_capacity(l);
        let mut vs = Vec::with_capacity(l);
        for (j, &f) in window.iter().enumerate() {
            let x = g.reshape(f, &[p, d]);
            let k = self.k.forward(g, x);
            let off = g.slice(offsets, 0, j, 1);
            let off = g.reshape(off, &[d]);
            let k = g.add_row(k, off);
            ks.push(g.reshape(k, &[p, 1, d]));
            let v = self.v.forward(g, x);
            vs.push(g.reshape(v, &[p, 1, d]));
        }
        let stack = |g: &mut Graph, parts: &[Var]| {
            let s = g.concat(parts, 1);
            let s = g.reshape(s, &[p, l, heads, dh]);
            let s = g.permute(s, &[0, 2, 1, 3]);
            g.reshape(s, &[p * heads, l, dh])
        };
        let k = stack(g, &ks);
        let v = stack(g, &vs);
        let logits = g.bmm(q, k, true);
        let logits = g.scale(logits, 1.0 / (dh as f64).sqrt());
        let attn = g.softmax(logits);
        let ctx = g.bmm(attn, v, false);
        let ctx = g.reshape(ctx, &[p, d]);
        let o = self.out.forward(g, ctx);
        Ok((g.reshape(o, &[h, w, d]), attn))
    }
}

/// Concatenates `N` scale maps along channels and applies a position-wise 2-layer MLP (`N*D -> D`).
pub fn merge_scales(g: &mut Graph, mlp: &Mlp2, scales: &[Var]) -> Var {
    let shape = g.shape(scales[0]).to_vec();
    let cat = g.concat(scales, 2);
    let out = mlp.forward(g, cat);
    let d = g.shape(out)[2];
    debug_assert_eq!(&g.shape(out)[..2], &shape[..2]);
    let _ = d;
    out
}

/// ViewTemp for one view.
#[derive(Clone, Debug)]
pub struct ViewTempBranch {
    pub conv: MultiScaleConv,
    pub attention: Vec<LocalTemporalAttention>,
    pub merge: Mlp2,
}

impl ViewTempBranch {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        kernels: ViewKernelSet,
        cfg: &ViewTempConfig,
        dim: usize,
        window: usize,
    ) -> Result<Self, ViewTempError> {
        let n = kernels.kernel_sizes.len();
        let conv = MultiScaleConv::new(store, init, &format!("{name}.conv"), kernels, dim)?;
        let n_attn = if cfg.shared_qkv { 1 } else { n };
        let attention = (0..n_attn)
            .map(|i| LocalTemporalAttention::new(store, init, &format!("{name}.attn{i}"), dim, cfg.heads, window))
            .collect();
        let merge = Mlp2::new(store, init, &format!("{name}.merge"), n * dim, dim, dim);
        Ok(Self { conv, attention, merge })
    }

    /// Fused map for the newest frame: `f_t + merge(d_1..d_N)`.
    pub fn forward(&self, g: &mut Graph, block: &TemporalFeatureBlock) -> Result<Var, ViewTempError> {
        let per_frame: Vec<Vec<Var>> = block.frames.iter().map(|&f| self.conv.forward(g, f)).collect();
        let n = self.conv.kernels.kernel_sizes.len();
        let mut fused_scales = Vec::with_capacity(n);
        for i in 0..n {
            let window: Vec<Var> = per_frame.iter().map(|s| s[i]).collect();
            let attn = &self.attention[i.min(self.attention.len() - 1)];
            let (d, _) = attn.forward(g, *window.last().unwrap(), &window)?;
            fused_scales.push(d);
        }
        let merged = merge_scales(g, &self.merge, &fused_scales);
        Ok(g.add(block.current(), merged))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kernel_validation() {
        assert!(ViewKernelSet::new("view1", vec![1, 3, 5, 7]).is_ok());
        assert_eq!(ViewKernelSet::new("view1", vec![3, 4]).unwrap_err(), ViewTempError::EvenKernel(4));
        assert!(ViewKernelSet::new("view1", vec![]).is_err());
    }

    #[test]
    fn backbone_shapes() {
        let mut store = ParamStore::new();
        let mut init = Init::new(1);
        let bb = PatchBackbone::new(&mut store, &mut init, &BackboneConfig { hidden: 8, ..Default::default() }, 16).unwrap();
        let img = Tensor::full(&[192, 256, 3], 0.5);
        let mut g = Graph::with_params(&store);
        let blocks = bb
            .extract_features(
                &mut g,
                &[("view1".into(), vec![img.clone(), img.clone(), img.clone()]), ("view6".into(), vec![img.clone(); 3])],
            )
            .unwrap();
        assert_eq!(blocks.len(), 2);
        assert_eq!(blocks[0].len(), 3);
        assert_eq!(g.shape(blocks[0].frames[2]), &[12, 16, 16]);

        let bad = Tensor::full(&[100, 256, 3], 0.5);
        assert!(matches!(
            bb.extract_features(&mut g, &[("view1".into(), vec![bad])]),
            Err(ViewTempError::Resolution { .. })
        ));
        assert!(matches!(
            bb.extract_features(&mut g, &[("view1".into(), vec![img.clone(); 3]), ("view6".into(), vec![img; 2])]),
            Err(ViewTempError::FrameCount { .. })
        ));
    }

    #[test]
    fn multiscale_shapes_and_identity() {
        let mut store = ParamStore::new();
        let mut init = Init::new(2);
        let ks = ViewKernelSet::new("view1", vec![1, 3, 5, 7]).unwrap();
        let conv = MultiScaleConv::new(&mut store, &mut init, "c", ks, 8).unwrap();
        // Scale 0 (k=1): depthwise ones, pointwise identity, zero bias.
        *store.get_mut(conv.depthwise[0]) = Tensor::full(&[1, 1, 8], 1.0);
        let mut eye = vec![0.0; 64];
        for i in 0..8 {
            eye[i * 8 + i] = 1.0;
        }
        *store.get_mut(conv.pointwise[0].weight) = Tensor::new(&[8, 8], eye);
        let x = init.normal(&[12, 16, 8], 1.0);
        let mut g = Graph::with_params(&store);
        let xv = g.constant(x.clone());
        let out = conv.forward(&mut g, xv);
        assert_eq!(out.len(), 4);
        for o in &out {
            assert_eq!(g.shape(*o), &[12, 16, 8]);
        }
        assert_eq!(g.value(out[0]), &x);
    }

    #[test]
    fn constant_field_with_normalised_kernel() {
        // Interior of a constant field is preserved by a kernel whose taps sum to 1.
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[6, 6, 2], 3.0));
        let w = g.constant(Tensor::full(&[3, 3, 2], 1.0 / 9.0));
        let y = g.depthwise_conv(x, w);
        let v = g.value(y);
        for i in 1..5 {
            for j in 1..5 {
                for c in 0..2 {
                    assert!((v.data()[(i * 6 + j) * 2 + c] - 3.0).abs() < 1e-12);
                }
            }
        }
    }
}
