use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{CiaNetConfig, NamedStats, Param, DECODER_LEVELS};
use crate::tensor::{RunningStats, Scalar, Shape, Tensor};

/// Indices into the parameter list for one convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvRef {
    pub weight: usize,
    pub bias: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BnRef {
    pub scale: usize,
    pub shift: usize,
    pub stats: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BottleneckRef {
    pub bn1: BnRef,
    pub conv1: ConvRef,
    pub bn2: BnRef,
    pub conv2: ConvRef,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TransitionRef {
    pub bn: BnRef,
    pub conv: ConvRef,
}

/// Per-level decoder parameters of one branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelRefs {
    pub lateral: ConvRef,
    pub smooth: ConvRef,
    pub classifier: ConvRef,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BranchRefs {
    pub top: ConvRef,
    pub levels: Vec<LevelRefs>,
}

/// The two parallel convs that read the concatenated smoothed features.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IamRef {
    pub to_nuclei: ConvRef,
    pub to_contour: ConvRef,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub stem: ConvRef,
    pub stem_bn: BnRef,
    pub blocks: Vec<Vec<BottleneckRef>>,
    pub transitions: Vec<TransitionRef>,
    pub nuclei: BranchRefs,
    pub contour: BranchRefs,
    /// One entry per level that feeds a finer level (empty without aggregation).
    pub iam: Vec<IamRef>,
    pub param_count: usize,
}

#[derive(Clone, Copy, Debug)]
pub(crate) enum Init {
    He { fan_in: usize },
    Const(f64),
}

#[derive(Clone, Debug)]
pub(crate) struct ParamSpec {
    pub name: String,
    pub shape: Shape,
    pub init: Init,
}

/// Allocates named parameter slots and hands out their indices.
#[derive(Default)]
pub struct ParamPlanner {
    specs: Vec<ParamSpec>,
    bn: Vec<(String, usize)>,
}

impl ParamPlanner {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, name: String, shape: Shape, init: Init) -> usize {
        self.specs.push(ParamSpec { name, shape, init });
        self.specs.len() - 1
    }

    pub fn conv(&mut self, name: &str, out_c: usize, in_c: usize, k: usize, bias: bool) -> ConvRef {
        let weight = self.push(
            format!("{name}.weight"),
            Shape::new(out_c, in_c, k, k),
            Init::He { fan_in: in_c * k * k },
        );
        let bias = bias.then(|| self.push(format!("{name}.bias"), Shape::new(1, out_c, 1, 1), Init::Const(0.0)));
        ConvRef { weight, bias }
    }

    pub fn bn(&mut self, name: &str, c: usize) -> BnRef {
        let scale = self.push(format!("{name}.scale"), Shape::new(1, c, 1, 1), Init::Const(1.0));
        let shift = self.push(format!("{name}.shift"), Shape::new(1, c, 1, 1), Init::Const(0.0));
        self.bn.push((name.to_string(), c));
        BnRef {
            scale,
            shift,
            stats: self.bn.len() - 1,
        }
    }

    pub fn bottleneck(&mut self, name: &str, c_in: usize, k: usize) -> BottleneckRef {
        BottleneckRef {
            bn1: self.bn(&format!("{name}.bn1"), c_in),
            conv1: self.conv(&format!("{name}.conv1"), 4 * k, c_in, 1, false),
            bn2: self.bn(&format!("{name}.bn2"), 4 * k),
            conv2: self.conv(&format!("{name}.conv2"), k, 4 * k, 3, false),
        }
    }

    pub fn transition(&mut self, name: &str, c_in: usize, c_out: usize) -> TransitionRef {
        TransitionRef {
            bn: self.bn(&format!("{name}.bn"), c_in),
            conv: self.conv(&format!("{name}.conv"), c_out, c_in, 1, false),
        }
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    /// Draws initial values (He-normal weights, constant BN/bias) from `seed`.
    pub fn materialize<T: Scalar>(&self, seed: u64) -> (Vec<Param<T>>, Vec<NamedStats<T>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = self
            .specs
            .iter()
            .map(|spec| {
                let tensor = match spec.init {
                    Init::He { fan_in } => {
                        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
                        let data = (0..spec.shape.numel())
                            .map(|_| T::from_f64(normal.sample(&mut rng)))
                            .collect();
                        Tensor::from_vec(spec.shape, data).expect("planned shape")
                    }
                    Init::Const(v) => Tensor::full(spec.shape, T::from_f64(v)),
                };
                Param {
                    name: spec.name.clone(),
                    tensor,
                }
            })
            .collect();
        let stats = self
            .bn
            .iter()
            .map(|(name, c)| NamedStats {
                name: name.clone(),
                stats: RunningStats::new(*c),
            })
            .collect();
        (params, stats)
    }
}

pub(crate) fn plan(cfg: &CiaNetConfig) -> (Layout, ParamPlanner) {
    let mut p = ParamPlanner::new();
    let k = cfg.growth_rate;
    let width = cfg.decoder_width;

    let stem = p.conv("stem.conv", cfg.stem_channels, cfg.input_channels, 7, false);
    let stem_bn = p.bn("stem.bn", cfg.stem_channels);

    let mut c = cfg.stem_channels;
    let mut blocks = Vec::new();
    let mut transitions = Vec::new();
    let mut encoder_channels = Vec::new();
    for (b, &n) in cfg.block_sizes.iter().enumerate() {
        let mut layers = Vec::new();
        for l in 0..n {
            layers.push(p.bottleneck(&format!("dm{}.layer{}", b + 1, l + 1), c, k));
            c += k;
        }
        blocks.push(layers);
        encoder_channels.push(c);
        if b < 3 {
            let out = cfg.transition_channels(c);
            transitions.push(p.transition(&format!("tm{}", b + 1), c, out));
            c = out;
        }
    }

    let branch = |p: &mut ParamPlanner, name: &str| BranchRefs {
        top: p.conv(&format!("{name}.top"), width, encoder_channels[3], 3, true),
        levels: (0..DECODER_LEVELS)
            .map(|lvl| LevelRefs {
                lateral: p.conv(
                    &format!("{name}.level{}.lateral", lvl + 1),
                    width,
                    encoder_channels[2 - lvl],
                    1,
                    true,
                ),
                smooth: p.conv(&format!("{name}.level{}.smooth", lvl + 1), width, width, 3, true),
                classifier: p.conv(&format!("{name}.level{}.classifier", lvl + 1), 1, width, 1, true),
            })
            .collect(),
    };
    let nuclei = branch(&mut p, "nuclei");
    let contour = branch(&mut p, "contour");

    let iam = if cfg.use_iam {
        (0..DECODER_LEVELS - 1)
            .map(|lvl| IamRef {
                to_nuclei: p.conv(&format!("iam{}.to_nuclei", lvl + 1), width, 2 * width, 3, true),
                to_contour: p.conv(&format!("iam{}.to_contour", lvl + 1), width, 2 * width, 3, true),
            })
            .collect()
    } else {
        Vec::new()
    };

    let layout = Layout {
        stem,
        stem_bn,
        blocks,
        transitions,
        nuclei,
        contour,
        iam,
        param_count: p.len(),
    };
    (layout, p)
}
