//! Dense encoder, twin nuclei/contour decoders and the information
//! aggregation coupling between them.

pub mod checkpoint;
mod layout;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Mode, RunningStats, Scalar, Shape, Tape, Tensor, Var};

pub use layout::{
    BnRef, BottleneckRef, BranchRefs, ConvRef, IamRef, Layout, LevelRefs, ParamPlanner, TransitionRef,
};

/// Batch-norm epsilon used throughout the network.
pub const BN_EPS: f64 = 1e-5;

/// Decoder levels with score maps, coarsest first: 1/8, 1/4 and 1/2 of the input.
pub const DECODER_LEVELS: usize = 3;

/// Architecture hyperparameters. Defaults to the toy preset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CiaNetConfig {
    pub growth_rate: usize,
    pub block_sizes: Vec<usize>,
    pub stem_channels: usize,
    pub compression: f64,
    pub decoder_width: usize,
    pub use_iam: bool,
    pub input_channels: usize,
}

impl Default for CiaNetConfig {
    fn default() -> Self {
        CiaNetConfig::toy()
    }
}

impl CiaNetConfig {
    /// Desk-scale preset: four 2-layer dense modules, k = 8, decoder width 32.
    pub fn toy() -> Self {
        CiaNetConfig {
            growth_rate: 8,
            block_sizes: vec![2, 2, 2, 2],
            stem_channels: 16,
            compression: 0.5,
            decoder_width: 32,
            use_iam: true,
            input_channels: 3,
        }
    }

    /// DenseNet-121 sized encoder: {6, 12, 24, 16} layers, k = 32.
    pub fn paper() -> Self {
        CiaNetConfig {
            growth_rate: 32,
            block_sizes: vec![6, 12, 24, 16],
            stem_channels: 64,
            compression: 0.5,
            decoder_width: 128,
            use_iam: true,
            input_channels: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.block_sizes.len() != 4 {
            return Err(Error::Config(format!(
                "block_sizes must list exactly 4 dense modules, got {}",
                self.block_sizes.len()
            )));
        }
        if self.growth_rate == 0 || self.stem_channels == 0 || self.decoder_width == 0 {
            return Err(Error::Config("growth_rate, stem_channels and decoder_width must be positive".into()));
        }
        if !(self.compression > 0.0 && self.compression <= 1.0) {
            return Err(Error::Config(format!("compression {} outside (0, 1]", self.compression)));
        }
        if self.input_channels != 3 {
            return Err(Error::Config("input_channels must be 3".into()));
        }
        let mut c = self.stem_channels;
        for (i, &n) in self.block_sizes.iter().enumerate() {
            c += n * self.growth_rate;
            if i < 3 {
                c = self.transition_channels(c);
                if c == 0 {
                    return Err(Error::Config("transition compresses to zero channels".into()));
                }
            }
        }
        Ok(())
    }

    pub(crate) fn transition_channels(&self, c: usize) -> usize {
        (self.compression * c as f64).floor() as usize
    }
}

/// One trainable tensor and its stable name.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedStats<T> {
    pub name: String,
    pub stats: RunningStats<T>,
}

/// Score-map handles for one decoder level.
#[derive(Clone, Copy, Debug)]
pub struct LevelVars {
    pub nuclei: Var,
    pub contour: Var,
}

/// Tape handles of every prediction.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    /// Coarsest first (1/8, 1/4, 1/2 of the input).
    pub levels: Vec<LevelVars>,
    pub final_nuclei: Var,
    pub final_contour: Var,
}

impl ForwardVars {
    /// Deep-supervision maps: the three decoder levels then the full-resolution pair.
    pub fn supervised(&self) -> Vec<LevelVars> {
        let mut out = self.levels.clone();
        out.push(LevelVars {
            nuclei: self.final_nuclei,
            contour: self.final_contour,
        });
        out
    }
}

/// Materialized probability maps (each N×1×h×w).
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutputs<T> {
    pub levels: Vec<(Tensor<T>, Tensor<T>)>,
    pub final_nuclei: Tensor<T>,
    pub final_contour: Tensor<T>,
}

/// Output of one information aggregation step.
#[derive(Clone, Copy, Debug)]
pub struct IamOutput {
    pub f_nuclei: Var,
    pub f_contour: Var,
    /// Next-level features `(M_nuclei, M_contour)`; absent at the finest level.
    pub next: Option<(Var, Var)>,
}

/// Recording context: tape, registered parameters and mutable BN statistics.
pub struct Graph<'a, T: Scalar> {
    pub tape: &'a mut Tape<T>,
    pub params: &'a [Var],
    pub stats: &'a mut [RunningStats<T>],
    pub mode: Mode,
}

impl<'a, T: Scalar> Graph<'a, T> {
    pub fn conv(&mut self, c: &ConvRef, x: Var, stride: usize) -> Result<Var> {
        let w = self.params[c.weight];
        let k = self.tape.shape(w).h;
        self.tape
            .conv2d(x, w, c.bias.map(|b| self.params[b]), stride, k / 2)
    }

    pub fn bn_relu(&mut self, b: &BnRef, x: Var) -> Result<Var> {
        let y = self.tape.batch_norm(
            x,
            self.params[b.scale],
            self.params[b.shift],
            &mut self.stats[b.stats],
            self.mode,
            BN_EPS,
        )?;
        Ok(self.tape.relu(y))
    }

    /// BN→ReLU→1×1 conv (4k)→BN→ReLU→3×3 conv (k).
    pub fn bottleneck(&mut self, l: &BottleneckRef, x: Var) -> Result<Var> {
        let h = self.bn_relu(&l.bn1, x)?;
        let h = self.conv(&l.conv1, h, 1)?;
        let h = self.bn_relu(&l.bn2, h)?;
        self.conv(&l.conv2, h, 1)
    }

    /// Each layer sees the concatenation of the block input and all earlier outputs.
    pub fn dense_module(&mut self, layers: &[BottleneckRef], x: Var) -> Result<Var> {
        let mut feats = x;
        for l in layers {
            let y = self.bottleneck(l, feats)?;
            feats = self.tape.concat(&[feats, y])?;
        }
        Ok(feats)
    }

    /// BN→ReLU→1×1 compression conv→2×2 average pool.
    pub fn transition(&mut self, t: &TransitionRef, x: Var) -> Result<Var> {
        let s = self.tape.shape(x);
        if s.h % 2 != 0 {
            return Err(Error::dim("transition", "H", s.h + 1, s.h));
        }
        if s.w % 2 != 0 {
            return Err(Error::dim("transition", "W", s.w + 1, s.w));
        }
        let h = self.bn_relu(&t.bn, x)?;
        let h = self.conv(&t.conv, h, 1)?;
        self.tape.avg_pool2d(h)
    }

    /// `D = upsample2x(M_upper) + conv1x1(encoder)`.
    pub fn lateral_merge(&mut self, lateral: &ConvRef, encoder: Var, upper: Var) -> Result<Var> {
        let up = self.tape.upsample2x(upper);
        let lat = self.conv(lateral, encoder, 1)?;
        let (su, sl) = (self.tape.shape(up), self.tape.shape(lat));
        if su.h != sl.h {
            return Err(Error::dim("lateral_merge", "H", sl.h, su.h));
        }
        if su.w != sl.w {
            return Err(Error::dim("lateral_merge", "W", sl.w, su.w));
        }
        self.tape.add(up, lat)
    }

    /// Smoothing convs on both branches, then (when present) the two
    /// parallel convs over their concatenation. Without aggregation
    /// parameters each branch simply carries its smoothed features forward.
    pub fn iam(
        &mut self,
        nuclei: &LevelRefs,
        contour: &LevelRefs,
        iam: Option<&IamRef>,
        d_nuclei: Var,
        d_contour: Var,
        need_next: bool,
    ) -> Result<IamOutput> {
        let (sn, sc) = (self.tape.shape(d_nuclei), self.tape.shape(d_contour));
        if sn != sc {
            return Err(Error::dim("iam_forward", "C", sn.c, sc.c));
        }
        let f_nuclei = self.conv(&nuclei.smooth, d_nuclei, 1)?;
        let f_contour = self.conv(&contour.smooth, d_contour, 1)?;
        let next = match (need_next, iam) {
            (false, _) => None,
            (true, Some(iam)) => {
                let cat = self.tape.concat(&[f_nuclei, f_contour])?;
                let mn = self.conv(&iam.to_nuclei, cat, 1)?;
                let mc = self.conv(&iam.to_contour, cat, 1)?;
                Some((self.tape.relu(mn), self.tape.relu(mc)))
            }
            (true, None) => Some((f_nuclei, f_contour)),
        };
        Ok(IamOutput {
            f_nuclei,
            f_contour,
            next,
        })
    }

    /// 1×1 conv to one channel followed by a sigmoid.
    pub fn classifier(&mut self, c: &ConvRef, f: Var) -> Result<Var> {
        let logits = self.conv(c, f, 1)?;
        Ok(self.tape.sigmoid(logits))
    }
}

/// Complete network: configuration, parameter layout, weights and BN state.
#[derive(Clone, Debug, PartialEq)]
pub struct CiaNet<T> {
    pub config: CiaNetConfig,
    pub layout: Layout,
    pub params: Vec<Param<T>>,
    pub bn_stats: Vec<NamedStats<T>>,
}

impl<T: Scalar> CiaNet<T> {
    /// Allocates every parameter: He-normal conv weights, zero biases,
    /// BN scale 1 and shift 0. Deterministic in `seed`.
    pub fn build(config: &CiaNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, planner) = layout::plan(config);
        let (params, bn_stats) = planner.materialize(seed);
        Ok(CiaNet {
            config: config.clone(),
            layout,
            params,
            bn_stats,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    /// Records all parameters as leaves, in layout order.
    pub fn register(&self, tape: &mut Tape<T>, requires_grad: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.tensor.clone(), requires_grad))
            .collect()
    }

    /// Records the full forward pass. Train mode updates BN running statistics.
    pub fn forward(&mut self, tape: &mut Tape<T>, params: &[Var], input: Var, mode: Mode) -> Result<ForwardVars> {
        let mut stats: Vec<RunningStats<T>> = self.bn_stats.iter().map(|s| s.stats.clone()).collect();
        let out = forward_with(&self.layout, tape, params, &mut stats, input, mode)?;
        if mode == Mode::Train {
            for (dst, src) in self.bn_stats.iter_mut().zip(stats) {
                dst.stats = src;
            }
        }
        Ok(out)
    }

    /// Eval-mode inference on an N×3×H×W batch.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<ForwardOutputs<T>> {
        let mut tape = Tape::new();
        let params = self.register(&mut tape, false);
        let input = tape.constant(batch.clone());
        let mut stats: Vec<RunningStats<T>> = self.bn_stats.iter().map(|s| s.stats.clone()).collect();
        let vars = forward_with(&self.layout, &mut tape, &params, &mut stats, input, Mode::Eval)?;
        Ok(ForwardOutputs {
            levels: vars
                .levels
                .iter()
                .map(|l| (tape.value(l.nuclei).clone(), tape.value(l.contour).clone()))
                .collect(),
            final_nuclei: tape.value(vars.final_nuclei).clone(),
            final_contour: tape.value(vars.final_contour).clone(),
        })
    }

    /// Same network with every value converted to another precision.
    pub fn cast<U: Scalar>(&self) -> CiaNet<U> {
        CiaNet {
            config: self.config.clone(),
            layout: self.layout.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    tensor: p.tensor.cast(),
                })
                .collect(),
            bn_stats: self
                .bn_stats
                .iter()
                .map(|s| NamedStats {
                    name: s.name.clone(),
                    stats: RunningStats {
                        mean: s.stats.mean.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                        var: s.stats.var.iter().map(|v| U::from_f64(v.as_f64())).collect(),
                    },
                })
                .collect(),
        }
    }
}

fn forward_with<T: Scalar>(
    layout: &Layout,
    tape: &mut Tape<T>,
    params: &[Var],
    stats: &mut [RunningStats<T>],
    input: Var,
    mode: Mode,
) -> Result<ForwardVars> {
    if params.len() != layout.param_count {
        return Err(Error::dim("forward", "params", layout.param_count, params.len()));
    }
    let s = tape.shape(input);
    if s.c != 3 {
        return Err(Error::dim("forward", "C", 3, s.c));
    }
    if s.h % 16 != 0 || s.h == 0 {
        return Err(Error::dim("forward", "H", s.h.div_ceil(16).max(1) * 16, s.h));
    }
    if s.w % 16 != 0 || s.w == 0 {
        return Err(Error::dim("forward", "W", s.w.div_ceil(16).max(1) * 16, s.w));
    }
    let mut g = Graph {
        tape,
        params,
        stats,
        mode,
    };

    let x = g.conv(&layout.stem, input, 2)?;
    let mut x = g.bn_relu(&layout.stem_bn, x)?;
    let mut encoder = Vec::with_capacity(4);
    for (i, block) in layout.blocks.iter().enumerate() {
        x = g.dense_module(block, x)?;
        encoder.push(x);
        if i < 3 {
            x = g.transition(&layout.transitions[i], x)?;
        }
    }

    let top = encoder[3];
    let mut m_nuclei = g.conv(&layout.nuclei.top, top, 1)?;
    let mut m_contour = g.conv(&layout.contour.top, top, 1)?;
    let mut levels = Vec::with_capacity(DECODER_LEVELS);
    for lvl in 0..DECODER_LEVELS {
        let enc = encoder[2 - lvl];
        let (nl, cl) = (&layout.nuclei.levels[lvl], &layout.contour.levels[lvl]);
        let d_nuclei = g.lateral_merge(&nl.lateral, enc, m_nuclei)?;
        let d_contour = g.lateral_merge(&cl.lateral, enc, m_contour)?;
        let need_next = lvl + 1 < DECODER_LEVELS;
        let out = g.iam(nl, cl, layout.iam.get(lvl), d_nuclei, d_contour, need_next)?;
        levels.push(LevelVars {
            nuclei: g.classifier(&nl.classifier, out.f_nuclei)?,
            contour: g.classifier(&cl.classifier, out.f_contour)?,
        });
        if let Some((mn, mc)) = out.next {
            m_nuclei = mn;
            m_contour = mc;
        }
    }
    let finest = levels[DECODER_LEVELS - 1];
    let final_nuclei = g.tape.upsample2x(finest.nuclei);
    let final_contour = g.tape.upsample2x(finest.contour);
    Ok(ForwardVars {
        levels,
        final_nuclei,
        final_contour,
    })
}

/// Expected spatial size of each decoder level for an input of `h`×`w`.
pub fn level_shapes(n: usize, h: usize, w: usize) -> Vec<Shape> {
    [8, 4, 2].iter().map(|&d| Shape::new(n, 1, h / d, w / d)).collect()
}

#[cfg(test)]
mod tests;
