//! Minimal dense-tensor network engine over the fixed layer vocabulary of
//! the two shipped architectures (conv 3x3, max/mean pool 2x2, dropout,
//! fully-connected, softmax), with two-stage training and 512-dim feature
//! extraction from the first fully-connected layer.

pub mod gradcheck;
pub mod layers;
pub mod tensor;
mod train;

pub use layers::PoolKind;
pub use tensor::{Scalar, Tensor};
pub use train::{
    finetune_stage_triplet, l2_normalize_with_grad, select_triplets, sgd_step, train_stage_softmax,
    triplet_loss, Dataset, Gradients, ParamGrad, SgdState, TrainConfig, TripletStageLog,
};

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::io_util;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("build error at layer '{layer}': {msg}")]
    Build { layer: String, msg: String },
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("training diverged (non-finite loss) at epoch {epoch}, batch {batch}")]
    Divergence { epoch: usize, batch: usize },
    #[error("net spec format error at line {line}: {msg}")]
    SpecFormat { line: usize, msg: String },
    #[error("unknown ablation variant '{0}'")]
    UnknownVariant(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    MaxPool,
    MeanPool,
    Dropout,
    FullyConnected,
    Softmax,
}

impl LayerKind {
    fn tag(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::MaxPool => "maxpool",
            LayerKind::MeanPool => "meanpool",
            LayerKind::Dropout => "dropout",
            LayerKind::FullyConnected => "fully-conn",
            LayerKind::Softmax => "softmax",
        }
    }

    fn from_tag(s: &str) -> Option<LayerKind> {
        Some(match s {
            "conv" => LayerKind::Conv,
            "maxpool" => LayerKind::MaxPool,
            "meanpool" => LayerKind::MeanPool,
            "dropout" => LayerKind::Dropout,
            "fully-conn" => LayerKind::FullyConnected,
            "softmax" => LayerKind::Softmax,
            _ => return None,
        })
    }
}

/// One row of the architecture table.
///
/// `in_h`/`in_w` mirror the table's "Input Size" cell: the spatial input
/// for conv/pool rows, the vector length for dropout/softmax rows, and the
/// layer's own width for fully-connected rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub in_h: usize,
    pub in_w: usize,
    pub filter_count: usize,
    pub filter_size: usize,
    pub stride: usize,
    pub pad: usize,
    pub with_relu: bool,
}

/// ReLU placement and terminal pooling choices distinguishing the
/// ablation variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VariantFlags {
    pub relu_after_last_conv: bool,
    pub relu_after_fc6: bool,
    pub last_pool_kind: PoolKind,
}

/// Declarative layer table plus input geometry.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetSpec {
    pub layers: Vec<LayerSpec>,
    pub input_channels: usize,
}

impl NetSpec {
    pub fn input_h(&self) -> usize {
        self.layers[0].in_h
    }

    pub fn input_w(&self) -> usize {
        self.layers[0].in_w
    }

    /// Index of the feature layer (the first fully-connected layer).
    pub fn feature_layer_index(&self) -> Option<usize> {
        self.layers
            .iter()
            .position(|l| l.kind == LayerKind::FullyConnected)
    }

    /// Width of the feature layer (Fc6).
    pub fn feature_dim(&self) -> usize {
        self.feature_layer_index()
            .map(|i| self.layers[i].in_h)
            .unwrap_or(0)
    }

    /// Width of the last fully-connected layer (Fc7 = number of classes).
    pub fn class_count(&self) -> usize {
        self.layers
            .iter()
            .rev()
            .find(|l| l.kind == LayerKind::FullyConnected)
            .map(|l| l.in_h)
            .unwrap_or(0)
    }

    pub fn variant_flags(&self) -> VariantFlags {
        let last_conv = self.layers.iter().rev().find(|l| l.kind == LayerKind::Conv);
        let last_pool = self
            .layers
            .iter()
            .rev()
            .find(|l| matches!(l.kind, LayerKind::MaxPool | LayerKind::MeanPool));
        let fc6 = self.feature_layer_index().map(|i| &self.layers[i]);
        VariantFlags {
            relu_after_last_conv: last_conv.map(|l| l.with_relu).unwrap_or(false),
            relu_after_fc6: fc6.map(|l| l.with_relu).unwrap_or(false),
            last_pool_kind: match last_pool.map(|l| l.kind) {
                Some(LayerKind::MaxPool) => PoolKind::Max,
                _ => PoolKind::Mean,
            },
        }
    }

    /// Parses the one-layer-per-line text format:
    /// `name kind inH inW filters ksize stride pad relu`.
    pub fn parse(text: &str) -> Result<NetSpec, NetError> {
        let mut layers = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 9 {
                return Err(NetError::SpecFormat {
                    line: ln + 1,
                    msg: format!("expected 9 fields, got {}", fields.len()),
                });
            }
            let kind = LayerKind::from_tag(fields[1]).ok_or_else(|| NetError::SpecFormat {
                line: ln + 1,
                msg: format!("unknown layer kind '{}'", fields[1]),
            })?;
            let num = |s: &str| -> Result<usize, NetError> {
                s.parse().map_err(|_| NetError::SpecFormat {
                    line: ln + 1,
                    msg: format!("bad number '{s}'"),
                })
            };
            let with_relu = match fields[8] {
                "yes" => true,
                "no" => false,
                other => {
                    return Err(NetError::SpecFormat {
                        line: ln + 1,
                        msg: format!("relu flag must be yes/no, got '{other}'"),
                    })
                }
            };
            layers.push(LayerSpec {
                name: fields[0].to_string(),
                kind,
                in_h: num(fields[2])?,
                in_w: num(fields[3])?,
                filter_count: num(fields[4])?,
                filter_size: num(fields[5])?,
                stride: num(fields[6])?,
                pad: num(fields[7])?,
                with_relu,
            });
        }
        if layers.is_empty() {
            return Err(NetError::SpecFormat {
                line: 0,
                msg: "empty net spec".into(),
            });
        }
        Ok(NetSpec {
            layers,
            input_channels: 1,
        })
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{} {} {} {} {} {} {} {} {}",
                l.name,
                l.kind.tag(),
                l.in_h,
                l.in_w,
                l.filter_count,
                l.filter_size,
                l.stride,
                l.pad,
                if l.with_relu { "yes" } else { "no" }
            );
        }
        s
    }

    pub fn read_file(path: &Path) -> Result<NetSpec, NetError> {
        let text = std::fs::read_to_string(path).map_err(|source| NetError::Io {
            path: path.display().to_string(),
            source,
        })?;
        NetSpec::parse(&text)
    }
}

/// Activation shape at one point of the forward trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TraceShape {
    Spatial { c: usize, h: usize, w: usize },
    Flat { len: usize },
}

impl TraceShape {
    pub fn volume(self) -> usize {
        match self {
            TraceShape::Spatial { c, h, w } => c * h * w,
            TraceShape::Flat { len } => len,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TraceEntry {
    pub name: String,
    pub input: TraceShape,
    pub output: TraceShape,
}

/// Full forward shape trace, computed at build time and retained.
#[derive(Debug, Clone)]
pub struct ShapeTrace {
    pub entries: Vec<TraceEntry>,
}

impl ShapeTrace {
    pub fn entry(&self, name: &str) -> Option<&TraceEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

fn pool_out(extent: usize, k: usize, stride: usize, pad: usize) -> usize {
    (extent + 2 * pad - k) / stride + 1
}

/// Audits the spec end to end: checks every declared input-size cell
/// against the computed shape and returns the trace.
pub fn shape_trace(spec: &NetSpec) -> Result<ShapeTrace, NetError> {
    let mut cur = TraceShape::Spatial {
        c: spec.input_channels,
        h: spec.layers[0].in_h,
        w: spec.layers[0].in_w,
    };
    let build_err = |l: &LayerSpec, msg: String| NetError::Build {
        layer: l.name.clone(),
        msg,
    };
    let mut entries = Vec::with_capacity(spec.layers.len());
    for l in &spec.layers {
        let input = cur;
        let output = match l.kind {
            LayerKind::Conv | LayerKind::MaxPool | LayerKind::MeanPool => {
                let TraceShape::Spatial { c, h, w } = cur else {
                    return Err(build_err(l, "spatial layer after flatten".into()));
                };
                if (l.in_h, l.in_w) != (h, w) {
                    return Err(build_err(
                        l,
                        format!("declared input {}x{} but trace gives {h}x{w}", l.in_h, l.in_w),
                    ));
                }
                let k = l.filter_size;
                if h + 2 * l.pad < k || w + 2 * l.pad < k || l.stride == 0 {
                    return Err(build_err(l, "window does not fit input".into()));
                }
                let oh = pool_out(h, k, l.stride, l.pad);
                let ow = pool_out(w, k, l.stride, l.pad);
                let oc = if l.kind == LayerKind::Conv {
                    if l.filter_count == 0 {
                        return Err(build_err(l, "conv layer needs filters".into()));
                    }
                    l.filter_count
                } else {
                    c
                };
                TraceShape::Spatial {
                    c: oc,
                    h: oh,
                    w: ow,
                }
            }
            LayerKind::Dropout | LayerKind::Softmax => {
                let len = cur.volume();
                if l.in_h != len {
                    return Err(build_err(
                        l,
                        format!("declared length {} but trace gives {len}", l.in_h),
                    ));
                }
                TraceShape::Flat { len }
            }
            LayerKind::FullyConnected => {
                let _ = cur.volume(); // input flattens implicitly
                if l.in_h == 0 {
                    return Err(build_err(l, "fully-connected width must be positive".into()));
                }
                TraceShape::Flat { len: l.in_h }
            }
        };
        entries.push(TraceEntry {
            name: l.name.clone(),
            input,
            output,
        });
        cur = output;
    }
    Ok(ShapeTrace { entries })
}

/// Per-layer learned parameters; `None` for layers without any.
#[derive(Debug, Clone)]
pub enum LayerParams<T> {
    None,
    Conv { w: Tensor<T>, b: Vec<T> },
    Fc { w: Tensor<T>, b: Vec<T> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A built network: spec, parameters, mode flag, and the retained shape
/// trace.
#[derive(Debug, Clone)]
pub struct Network<T: Scalar = f32> {
    pub spec: NetSpec,
    pub params: Vec<LayerParams<T>>,
    pub mode: Mode,
    pub trace: ShapeTrace,
}

/// Builds a network: shape-checks the spec and allocates parameters with
/// zero-mean Gaussian init (std sqrt(2/fan_in)) and zero biases.
pub fn build_network<T: Scalar>(spec: &NetSpec, seed: u64) -> Result<Network<T>, NetError> {
    let trace = shape_trace(spec)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = Vec::with_capacity(spec.layers.len());
    for (l, entry) in spec.layers.iter().zip(&trace.entries) {
        let p = match l.kind {
            LayerKind::Conv => {
                let TraceShape::Spatial { c, .. } = entry.input else {
                    unreachable!()
                };
                let k = l.filter_size;
                let fan_in = c * k * k;
                let std = (2.0 / fan_in as f64).sqrt();
                let normal = Normal::new(0.0, std).unwrap();
                let w = Tensor::from_fn(&[l.filter_count, c, k, k], |_| {
                    T::from_f64(normal.sample(&mut rng))
                });
                LayerParams::Conv {
                    w,
                    b: vec![T::zero(); l.filter_count],
                }
            }
            LayerKind::FullyConnected => {
                let in_dim = entry.input.volume();
                let out_dim = l.in_h;
                let std = (2.0 / in_dim as f64).sqrt();
                let normal = Normal::new(0.0, std).unwrap();
                let w = Tensor::from_fn(&[out_dim, in_dim], |_| {
                    T::from_f64(normal.sample(&mut rng))
                });
                LayerParams::Fc {
                    w,
                    b: vec![T::zero(); out_dim],
                }
            }
            _ => LayerParams::None,
        };
        params.push(p);
    }
    Ok(Network {
        spec: spec.clone(),
        params,
        mode: Mode::Eval,
        trace,
    })
}

/// Recorded activations needed to run the backward pass.
pub enum LayerTape<T> {
    Skipped,
    Conv {
        input: Tensor<T>,
        pre: Tensor<T>,
    },
    Pool {
        input_shape: Vec<usize>,
        out_shape: Vec<usize>,
        argmax: Option<Vec<usize>>,
    },
    Dropout {
        mask: Vec<T>,
    },
    Fc {
        input: Vec<T>,
        pre: Vec<T>,
    },
    Noop,
}

/// One recorded forward pass.
pub struct TapedPass<T> {
    pub feature: Vec<T>,
    pub logits: Option<Vec<T>>,
    tape: Vec<LayerTape<T>>,
}

struct ForwardOpts<'r> {
    through_logits: bool,
    dropout_ratio: f64,
    rng: Option<&'r mut ChaCha8Rng>,
    record: bool,
}

enum Act<T> {
    Spatial(Tensor<T>),
    Flat(Vec<T>),
}

impl<T: Scalar> Act<T> {
    fn flat(self) -> Vec<T> {
        match self {
            Act::Spatial(t) => t.into_data(),
            Act::Flat(v) => v,
        }
    }
}

impl<T: Scalar> Network<T> {
    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim()
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<(), NetError> {
        let want = [
            self.spec.input_channels,
            self.spec.input_h(),
            self.spec.input_w(),
        ];
        if input.shape() != want {
            return Err(NetError::Dimension(format!(
                "input shape {:?} does not match spec {:?}",
                input.shape(),
                want
            )));
        }
        Ok(())
    }

    fn run_forward(&self, input: &Tensor<T>, mut opts: ForwardOpts) -> Result<TapedPass<T>, NetError> {
        self.check_input(input)?;
        let feature_idx = self
            .spec
            .feature_layer_index()
            .ok_or_else(|| NetError::Dimension("spec has no fully-connected feature layer".into()))?;
        let mut cur = Act::Spatial(input.clone());
        let mut tape = Vec::with_capacity(self.spec.layers.len());
        let mut feature: Option<Vec<T>> = None;
        let mut logits: Option<Vec<T>> = None;
        for (i, l) in self.spec.layers.iter().enumerate() {
            if !opts.through_logits && i > feature_idx {
                tape.push(LayerTape::Skipped);
                continue;
            }
            match l.kind {
                LayerKind::Conv => {
                    let Act::Spatial(x) = cur else {
                        return Err(NetError::Dimension(format!(
                            "conv layer '{}' after flatten",
                            l.name
                        )));
                    };
                    let LayerParams::Conv { w, b } = &self.params[i] else {
                        unreachable!()
                    };
                    let pre = layers::conv2d_forward(&x, w, b, l.stride, l.pad)?;
                    let post = if l.with_relu {
                        layers::relu_forward(&pre)
                    } else {
                        pre.clone()
                    };
                    if opts.record {
                        tape.push(LayerTape::Conv { input: x, pre });
                    } else {
                        tape.push(LayerTape::Noop);
                    }
                    cur = Act::Spatial(post);
                }
                LayerKind::MaxPool | LayerKind::MeanPool => {
                    let Act::Spatial(x) = cur else {
                        return Err(NetError::Dimension(format!(
                            "pool layer '{}' after flatten",
                            l.name
                        )));
                    };
                    let kind = if l.kind == LayerKind::MaxPool {
                        PoolKind::Max
                    } else {
                        PoolKind::Mean
                    };
                    let (out, argmax) =
                        layers::pool2d_forward(&x, kind, l.filter_size, l.stride, l.pad)?;
                    if opts.record {
                        tape.push(LayerTape::Pool {
                            input_shape: x.shape().to_vec(),
                            out_shape: out.shape().to_vec(),
                            argmax,
                        });
                    } else {
                        tape.push(LayerTape::Noop);
                    }
                    cur = Act::Spatial(out);
                }
                LayerKind::Dropout => {
                    let x = cur.flat();
                    if self.mode == Mode::Train && opts.dropout_ratio > 0.0 {
                        let rng = opts.rng.as_deref_mut().ok_or_else(|| {
                            NetError::Dimension("training dropout requires an rng".into())
                        })?;
                        let (y, mask) = layers::dropout_forward(&x, opts.dropout_ratio, rng);
                        if opts.record {
                            tape.push(LayerTape::Dropout { mask });
                        } else {
                            tape.push(LayerTape::Noop);
                        }
                        cur = Act::Flat(y);
                    } else {
                        // Inverted dropout: eval mode is the identity.
                        if opts.record {
                            tape.push(LayerTape::Dropout {
                                mask: vec![T::one(); x.len()],
                            });
                        } else {
                            tape.push(LayerTape::Noop);
                        }
                        cur = Act::Flat(x);
                    }
                }
                LayerKind::FullyConnected => {
                    let x = cur.flat();
                    let LayerParams::Fc { w, b } = &self.params[i] else {
                        unreachable!()
                    };
                    let pre = layers::fc_forward(&x, w, b)?;
                    let pre_t = Tensor::from_vec(&[pre.len()], pre.clone());
                    let post = if l.with_relu {
                        layers::relu_forward(&pre_t).into_data()
                    } else {
                        pre.clone()
                    };
                    if opts.record {
                        tape.push(LayerTape::Fc { input: x, pre });
                    } else {
                        tape.push(LayerTape::Noop);
                    }
                    if i == feature_idx {
                        feature = Some(post.clone());
                    }
                    logits = Some(post.clone());
                    cur = Act::Flat(post);
                }
                LayerKind::Softmax => {
                    // Normalization lives in the loss; the row is a marker.
                    tape.push(LayerTape::Noop);
                }
            }
        }
        Ok(TapedPass {
            feature: feature
                .ok_or_else(|| NetError::Dimension("forward never reached feature layer".into()))?,
            logits: if opts.through_logits { logits } else { None },
            tape,
        })
    }

    /// Fc6 output in eval mode (deterministic; ReLU only when the variant
    /// says so). The dense default admits negative coordinates.
    pub fn extract_feature(&self, input: &Tensor<T>) -> Result<Vec<T>, NetError> {
        let pass = self.run_forward(
            input,
            ForwardOpts {
                through_logits: false,
                dropout_ratio: 0.0,
                rng: None,
                record: false,
            },
        )?;
        Ok(pass.feature)
    }

    /// Full eval-mode forward to the class logits (pre-softmax).
    pub fn forward_logits(&self, input: &Tensor<T>) -> Result<Vec<T>, NetError> {
        let pass = self.run_forward(
            input,
            ForwardOpts {
                through_logits: true,
                dropout_ratio: 0.0,
                rng: None,
                record: false,
            },
        )?;
        pass.logits
            .ok_or_else(|| NetError::Dimension("spec has no fully-connected layers".into()))
    }

    /// Recorded training forward through the logits.
    pub fn forward_train(
        &self,
        input: &Tensor<T>,
        dropout_ratio: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<TapedPass<T>, NetError> {
        self.run_forward(
            input,
            ForwardOpts {
                through_logits: true,
                dropout_ratio,
                rng: Some(rng),
                record: true,
            },
        )
    }

    /// Recorded training forward that stops at the feature layer.
    pub fn forward_train_feature(
        &self,
        input: &Tensor<T>,
        dropout_ratio: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<TapedPass<T>, NetError> {
        self.run_forward(
            input,
            ForwardOpts {
                through_logits: false,
                dropout_ratio,
                rng: Some(rng),
                record: true,
            },
        )
    }

    /// Backward from a gradient on the logits.
    pub fn backward_from_logits(&self, pass: &TapedPass<T>, dlogits: Vec<T>) -> Gradients<T> {
        let last_fc = self
            .spec
            .layers
            .iter()
            .rposition(|l| l.kind == LayerKind::FullyConnected)
            .expect("spec has fully-connected layers");
        self.backward_from(pass, last_fc, dlogits)
    }

    /// Backward from a gradient on the feature-layer output; parameters of
    /// layers above the feature layer receive no gradient.
    pub fn backward_from_feature(&self, pass: &TapedPass<T>, dfeature: Vec<T>) -> Gradients<T> {
        let idx = self.spec.feature_layer_index().expect("feature layer");
        self.backward_from(pass, idx, dfeature)
    }

    /// Walks layers `start..=0`, `grad` being w.r.t. the post-activation
    /// output of layer `start`.
    fn backward_from(&self, pass: &TapedPass<T>, start: usize, grad: Vec<T>) -> Gradients<T> {
        let mut grads = Gradients::zeros_like(self);
        let mut gflat: Vec<T> = grad;
        let mut gspatial: Option<Tensor<T>> = None;
        for i in (0..=start).rev() {
            let l = &self.spec.layers[i];
            match (&pass.tape[i], &self.params[i]) {
                (LayerTape::Fc { input, pre }, LayerParams::Fc { w, .. }) => {
                    let mut g = std::mem::take(&mut gflat);
                    if l.with_relu {
                        let pre_t = Tensor::from_vec(&[pre.len()], pre.clone());
                        let g_t = Tensor::from_vec(&[g.len()], g);
                        g = layers::relu_backward(&pre_t, &g_t).into_data();
                    }
                    let (dx, dw, db) = layers::fc_backward(input, w, &g);
                    grads.layers[i] = Some(ParamGrad { dw, db });
                    gflat = dx;
                }
                (LayerTape::Dropout { mask }, _) => {
                    gflat = layers::dropout_backward(&gflat, mask);
                }
                (LayerTape::Pool { input_shape, out_shape, argmax }, _) => {
                    let kind = if l.kind == LayerKind::MaxPool {
                        PoolKind::Max
                    } else {
                        PoolKind::Mean
                    };
                    let dout = match gspatial.take() {
                        Some(t) => t.reshaped(out_shape),
                        None => Tensor::from_vec(out_shape, std::mem::take(&mut gflat)),
                    };
                    gspatial = Some(layers::pool2d_backward(
                        input_shape,
                        kind,
                        &dout,
                        argmax.as_deref(),
                        l.filter_size,
                        l.stride,
                        l.pad,
                    ));
                }
                (LayerTape::Conv { input, pre }, LayerParams::Conv { w, .. }) => {
                    let dout = match gspatial.take() {
                        Some(t) => t.reshaped(pre.shape()),
                        None => Tensor::from_vec(pre.shape(), std::mem::take(&mut gflat)),
                    };
                    let dout = if l.with_relu {
                        layers::relu_backward(pre, &dout)
                    } else {
                        dout
                    };
                    let (dx, dw, db) = layers::conv2d_backward(input, w, &dout, l.stride, l.pad);
                    grads.layers[i] = Some(ParamGrad { dw, db });
                    gspatial = Some(dx);
                }
                (LayerTape::Noop, _) | (LayerTape::Skipped, _) => {}
                _ => unreachable!("tape/params out of sync at layer {i}"),
            }
        }
        grads
    }
}

const CKPT_MAGIC: &[u8; 4] = b"MMNN";
const CKPT_VERSION: u32 = 1;

use io_util::{read_f32_blob as read_blob, write_f32_blob};

fn write_blob<W: Write>(w: &mut W, shape: &[usize], data: &[f32]) -> std::io::Result<()> {
    write_f32_blob(w, shape, data)
}

impl Network<f32> {
    /// Binary checkpoint: magic, version, spec text, then per-layer weight
    /// and bias blobs (little-endian f32 with declared shapes).
    pub fn save(&self, path: &Path) -> Result<(), NetError> {
        let io_err = |source| NetError::Io {
            path: path.display().to_string(),
            source,
        };
        let file = File::create(path).map_err(io_err)?;
        let mut w = BufWriter::new(file);
        w.write_all(CKPT_MAGIC).map_err(io_err)?;
        io_util::write_u32(&mut w, CKPT_VERSION).map_err(io_err)?;
        let spec_text = self.spec.to_text();
        io_util::write_u32(&mut w, spec_text.len() as u32).map_err(io_err)?;
        w.write_all(spec_text.as_bytes()).map_err(io_err)?;
        for p in &self.params {
            match p {
                LayerParams::Conv { w: wt, b } | LayerParams::Fc { w: wt, b } => {
                    write_blob(&mut w, wt.shape(), wt.data()).map_err(io_err)?;
                    write_blob(&mut w, &[b.len()], b).map_err(io_err)?;
                }
                LayerParams::None => {}
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Network<f32>, NetError> {
        let io_err = |source| NetError::Io {
            path: path.display().to_string(),
            source,
        };
        let file = File::open(path).map_err(io_err)?;
        let mut r = BufReader::new(file);
        let magic = io_util::read_exact_array::<4>(&mut r).map_err(io_err)?;
        if &magic != CKPT_MAGIC {
            return Err(NetError::Checkpoint(format!(
                "{}: bad magic {:?}",
                path.display(),
                magic
            )));
        }
        let version = io_util::read_u32(&mut r).map_err(io_err)?;
        if version != CKPT_VERSION {
            return Err(NetError::Checkpoint(format!(
                "{}: unsupported version {version}",
                path.display()
            )));
        }
        let spec_len = io_util::read_u32(&mut r).map_err(io_err)? as usize;
        let mut spec_bytes = vec![0u8; spec_len];
        r.read_exact(&mut spec_bytes).map_err(io_err)?;
        let spec_text = String::from_utf8(spec_bytes)
            .map_err(|_| NetError::Checkpoint("spec text is not UTF-8".into()))?;
        let spec = NetSpec::parse(&spec_text)?;
        let mut net: Network<f32> = build_network(&spec, 0)?;
        for (i, l) in spec.layers.iter().enumerate() {
            match l.kind {
                LayerKind::Conv | LayerKind::FullyConnected => {
                    let (wshape, wdata) = read_blob(&mut r).map_err(io_err)?;
                    let (bshape, bdata) = read_blob(&mut r).map_err(io_err)?;
                    let expected = match &net.params[i] {
                        LayerParams::Conv { w, .. } | LayerParams::Fc { w, .. } => {
                            w.shape().to_vec()
                        }
                        LayerParams::None => unreachable!(),
                    };
                    if wshape != expected || bshape.len() != 1 {
                        return Err(NetError::Checkpoint(format!(
                            "layer '{}': blob shape {wshape:?} does not match spec {expected:?}",
                            l.name
                        )));
                    }
                    let wt = Tensor::from_vec(&wshape, wdata);
                    net.params[i] = if l.kind == LayerKind::Conv {
                        LayerParams::Conv { w: wt, b: bdata }
                    } else {
                        LayerParams::Fc { w: wt, b: bdata }
                    };
                }
                _ => {}
            }
        }
        Ok(net)
    }
}

struct SpecBuilder {
    layers: Vec<LayerSpec>,
    c: usize,
    h: usize,
    w: usize,
}

impl SpecBuilder {
    fn new(h: usize, w: usize) -> Self {
        SpecBuilder {
            layers: Vec::new(),
            c: 1,
            h,
            w,
        }
    }

    fn conv(mut self, name: &str, filters: usize, pad: usize, relu: bool) -> Self {
        self.layers.push(LayerSpec {
            name: name.into(),
            kind: LayerKind::Conv,
            in_h: self.h,
            in_w: self.w,
            filter_count: filters,
            filter_size: 3,
            stride: 1,
            pad,
            with_relu: relu,
        });
        self.h = pool_out(self.h, 3, 1, pad);
        self.w = pool_out(self.w, 3, 1, pad);
        self.c = filters;
        self
    }

    fn pool(mut self, name: &str, kind: LayerKind, pad: usize) -> Self {
        self.layers.push(LayerSpec {
            name: name.into(),
            kind,
            in_h: self.h,
            in_w: self.w,
            filter_count: 0,
            filter_size: 2,
            stride: 2,
            pad,
            with_relu: false,
        });
        self.h = pool_out(self.h, 2, 2, pad);
        self.w = pool_out(self.w, 2, 2, pad);
        self
    }

    fn dropout(mut self, name: &str) -> Self {
        self.layers.push(LayerSpec {
            name: name.into(),
            kind: LayerKind::Dropout,
            in_h: self.c * self.h * self.w,
            in_w: 1,
            filter_count: 0,
            filter_size: 0,
            stride: 0,
            pad: 0,
            with_relu: false,
        });
        self
    }

    fn fc(mut self, name: &str, width: usize, relu: bool) -> Self {
        self.layers.push(LayerSpec {
            name: name.into(),
            kind: LayerKind::FullyConnected,
            in_h: width,
            in_w: 1,
            filter_count: 0,
            filter_size: 0,
            stride: 0,
            pad: 0,
            with_relu: relu,
        });
        // Fully-connected output is flat; spatial tracking ends here.
        self.c = width;
        self.h = 1;
        self.w = 1;
        self
    }

    fn softmax(mut self, name: &str) -> Self {
        self.layers.push(LayerSpec {
            name: name.into(),
            kind: LayerKind::Softmax,
            in_h: self.c * self.h * self.w,
            in_w: 1,
            filter_count: 0,
            filter_size: 0,
            stride: 0,
            pad: 0,
            with_relu: false,
        });
        self
    }

    fn finish(self) -> NetSpec {
        NetSpec {
            layers: self.layers,
            input_channels: 1,
        }
    }
}

/// NN1: 10 conv, 4 max-pool, 1 mean-pool, 2 fully-connected layers; no
/// ReLU after the last conv or Fc6 (dense features).
pub fn nn1_spec(input_h: usize, input_w: usize, feature_dim: usize, class_count: usize) -> NetSpec {
    SpecBuilder::new(input_h, input_w)
        .conv("Conv11", 64, 0, true)
        .conv("Conv12", 128, 0, true)
        .pool("Pool1", LayerKind::MaxPool, 0)
        .conv("Conv21", 64, 0, true)
        .conv("Conv22", 128, 0, true)
        .pool("Pool2", LayerKind::MaxPool, 0)
        .conv("Conv31", 64, 1, true)
        .conv("Conv32", 128, 1, true)
        .pool("Pool3", LayerKind::MaxPool, 1)
        .conv("Conv41", 128, 1, true)
        .conv("Conv42", 256, 1, true)
        .pool("Pool4", LayerKind::MaxPool, 0)
        .conv("Conv51", 128, 1, true)
        .conv("Conv52", 256, 1, false)
        .pool("Pool5", LayerKind::MeanPool, 1)
        .dropout("Dropout")
        .fc("Fc6", feature_dim, false)
        .fc("Fc7", class_count, false)
        .softmax("Softmax")
        .finish()
}

/// NN2: deeper and wider than NN1 (12 conv layers).
pub fn nn2_spec(input_h: usize, input_w: usize, feature_dim: usize, class_count: usize) -> NetSpec {
    SpecBuilder::new(input_h, input_w)
        .conv("Conv11", 64, 0, true)
        .conv("Conv12", 128, 0, true)
        .pool("Pool1", LayerKind::MaxPool, 0)
        .conv("Conv21", 64, 0, true)
        .conv("Conv22", 128, 0, true)
        .pool("Pool2", LayerKind::MaxPool, 0)
        .conv("Conv31", 128, 1, true)
        .conv("Conv32", 128, 1, true)
        .pool("Pool3", LayerKind::MaxPool, 1)
        .conv("Conv41", 256, 1, true)
        .conv("Conv42", 256, 1, true)
        .conv("Conv43", 256, 1, true)
        .pool("Pool4", LayerKind::MaxPool, 0)
        .conv("Conv51", 256, 1, true)
        .conv("Conv52", 256, 1, true)
        .conv("Conv53", 256, 1, false)
        .pool("Pool5", LayerKind::MeanPool, 1)
        .dropout("Dropout")
        .fc("Fc6", feature_dim, false)
        .fc("Fc7", class_count, false)
        .softmax("Softmax")
        .finish()
}

/// Desk-scale spec over the same layer vocabulary, for tests and the
/// synthetic benchmark.
pub fn tiny_spec(input_h: usize, input_w: usize, feature_dim: usize, class_count: usize) -> NetSpec {
    SpecBuilder::new(input_h, input_w)
        .conv("Conv1", 8, 1, true)
        .pool("Pool1", LayerKind::MaxPool, 0)
        .conv("Conv2", 16, 1, true)
        .pool("Pool2", LayerKind::MaxPool, 0)
        .conv("Conv3", 16, 1, false)
        .pool("Pool3", LayerKind::MeanPool, 0)
        .dropout("Dropout")
        .fc("Fc6", feature_dim, false)
        .fc("Fc7", class_count, false)
        .softmax("Softmax")
        .finish()
}

/// The three ReLU-usage variants compared in the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationVariant {
    Nn1,
    Nn1C52r,
    Nn1C52rFc6r,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 3] = [
        AblationVariant::Nn1,
        AblationVariant::Nn1C52r,
        AblationVariant::Nn1C52rFc6r,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AblationVariant::Nn1 => "NN1",
            AblationVariant::Nn1C52r => "NN1+C52R",
            AblationVariant::Nn1C52rFc6r => "NN1+C52R+Fc6R",
        }
    }

    pub fn from_name(name: &str) -> Result<Self, NetError> {
        match name {
            "NN1" => Ok(AblationVariant::Nn1),
            "NN1+C52R" => Ok(AblationVariant::Nn1C52r),
            "NN1+C52R+Fc6R" => Ok(AblationVariant::Nn1C52rFc6r),
            other => Err(NetError::UnknownVariant(other.to_string())),
        }
    }
}

/// Applies a ReLU-usage variant to an NN1-shaped base spec. Enabling the
/// last-conv ReLU also switches the terminal pool from mean to max.
pub fn make_ablation_variant(base: &NetSpec, variant: AblationVariant) -> Result<NetSpec, NetError> {
    let mut spec = base.clone();
    let last_conv = spec
        .layers
        .iter()
        .rposition(|l| l.kind == LayerKind::Conv)
        .ok_or_else(|| NetError::UnknownVariant("base spec has no conv layer".into()))?;
    let last_pool = spec.layers[last_conv..]
        .iter()
        .position(|l| matches!(l.kind, LayerKind::MaxPool | LayerKind::MeanPool))
        .map(|off| last_conv + off)
        .ok_or_else(|| NetError::UnknownVariant("base spec has no terminal pool".into()))?;
    let fc6 = spec
        .feature_layer_index()
        .ok_or_else(|| NetError::UnknownVariant("base spec has no feature layer".into()))?;
    let (conv_relu, fc6_relu) = match variant {
        AblationVariant::Nn1 => (false, false),
        AblationVariant::Nn1C52r => (true, false),
        AblationVariant::Nn1C52rFc6r => (true, true),
    };
    spec.layers[last_conv].with_relu = conv_relu;
    spec.layers[last_pool].kind = if conv_relu {
        LayerKind::MaxPool
    } else {
        LayerKind::MeanPool
    };
    spec.layers[fc6].with_relu = fc6_relu;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spatial(c: usize, h: usize, w: usize) -> TraceShape {
        TraceShape::Spatial { c, h, w }
    }

    #[test]
    fn nn1_trace_reproduces_table_cells() {
        let spec = nn1_spec(165, 120, 512, 9000);
        let trace = shape_trace(&spec).unwrap();
        let cell = |name: &str| trace.entry(name).unwrap().input;
        assert_eq!(cell("Conv11"), spatial(1, 165, 120));
        assert_eq!(cell("Conv12"), spatial(64, 163, 118));
        assert_eq!(cell("Pool1"), spatial(128, 161, 116));
        assert_eq!(cell("Conv21"), spatial(128, 80, 58));
        assert_eq!(cell("Conv22"), spatial(64, 78, 56));
        assert_eq!(cell("Pool2"), spatial(128, 76, 54));
        assert_eq!(cell("Conv31"), spatial(128, 38, 27));
        assert_eq!(cell("Conv32"), spatial(64, 38, 27));
        assert_eq!(cell("Pool3"), spatial(128, 38, 27));
        assert_eq!(cell("Conv41"), spatial(128, 20, 14));
        assert_eq!(cell("Conv42"), spatial(128, 20, 14));
        assert_eq!(cell("Pool4"), spatial(256, 20, 14));
        assert_eq!(cell("Conv51"), spatial(256, 10, 7));
        assert_eq!(cell("Conv52"), spatial(128, 10, 7));
        assert_eq!(cell("Pool5"), spatial(256, 10, 7));
        assert_eq!(cell("Dropout"), spatial(256, 6, 4));
        assert_eq!(trace.entry("Dropout").unwrap().input.volume(), 6144);
        assert_eq!(trace.entry("Fc6").unwrap().output, TraceShape::Flat { len: 512 });
        assert_eq!(trace.entry("Fc7").unwrap().output, TraceShape::Flat { len: 9000 });
    }

    #[test]
    fn nn2_trace_reproduces_table_cells() {
        let spec = nn2_spec(165, 120, 512, 9000);
        let trace = shape_trace(&spec).unwrap();
        let cell = |name: &str| trace.entry(name).unwrap().input;
        assert_eq!(cell("Conv43"), spatial(256, 20, 14));
        assert_eq!(cell("Conv53"), spatial(256, 10, 7));
        assert_eq!(cell("Pool5"), spatial(256, 10, 7));
        assert_eq!(trace.entry("Dropout").unwrap().input.volume(), 6144);
        assert_eq!(trace.entry("Fc7").unwrap().output, TraceShape::Flat { len: 9000 });
    }

    #[test]
    fn build_rejects_inconsistent_cells() {
        let mut spec = nn1_spec(165, 120, 512, 9000);
        spec.layers[3].in_h = 81; // Conv21 declares 81x58, trace gives 80x58
        let err = shape_trace(&spec).unwrap_err();
        match err {
            NetError::Build { layer, .. } => assert_eq!(layer, "Conv21"),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn spec_text_round_trip() {
        let spec = nn2_spec(165, 120, 512, 9000);
        let text = spec.to_text();
        let back = NetSpec::parse(&text).unwrap();
        assert_eq!(back, spec);
    }

    #[test]
    fn variant_flags_follow_the_table() {
        let nn1 = nn1_spec(165, 120, 512, 9000);
        let flags = nn1.variant_flags();
        assert!(!flags.relu_after_last_conv);
        assert!(!flags.relu_after_fc6);
        assert_eq!(flags.last_pool_kind, PoolKind::Mean);

        let c52r = make_ablation_variant(&nn1, AblationVariant::Nn1C52r).unwrap();
        let flags = c52r.variant_flags();
        assert!(flags.relu_after_last_conv);
        assert!(!flags.relu_after_fc6);
        assert_eq!(flags.last_pool_kind, PoolKind::Max);

        let full = make_ablation_variant(&nn1, AblationVariant::Nn1C52rFc6r).unwrap();
        let flags = full.variant_flags();
        assert!(flags.relu_after_last_conv);
        assert!(flags.relu_after_fc6);
        assert_eq!(flags.last_pool_kind, PoolKind::Max);
    }

    #[test]
    fn unknown_variant_name_is_rejected() {
        assert!(matches!(
            AblationVariant::from_name("NN3"),
            Err(NetError::UnknownVariant(_))
        ));
    }

    #[test]
    fn feature_extraction_shape_and_determinism() {
        let spec = tiny_spec(32, 24, 64, 10);
        let net: Network<f32> = build_network(&spec, 7).unwrap();
        let input = Tensor::from_fn(&[1, 32, 24], |i| ((i * 37 % 100) as f32) / 100.0);
        let f1 = net.extract_feature(&input).unwrap();
        let f2 = net.extract_feature(&input).unwrap();
        assert_eq!(f1.len(), 64);
        assert_eq!(f1, f2);
        // Dense default: some coordinates negative.
        assert!(f1.iter().any(|&v| v < 0.0));
    }

    #[test]
    fn fc6_relu_variant_clamps_features() {
        let base = tiny_spec(32, 24, 64, 10);
        let spec = make_ablation_variant(&base, AblationVariant::Nn1C52rFc6r).unwrap();
        let net: Network<f32> = build_network(&spec, 7).unwrap();
        let input = Tensor::from_fn(&[1, 32, 24], |i| ((i * 53 % 89) as f32) / 89.0);
        let f = net.extract_feature(&input).unwrap();
        assert!(f.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn fc6_map_is_affine_at_the_layer_level() {
        // Fc6(alpha*v) = alpha*Fc6(v) + (1-alpha)*b for the dense variant.
        let spec = tiny_spec(32, 24, 64, 10);
        let net: Network<f64> = build_network(&spec, 3).unwrap();
        let fc6 = spec.feature_layer_index().unwrap();
        let LayerParams::Fc { w, b } = &net.params[fc6] else {
            panic!()
        };
        let in_dim = w.shape()[1];
        let v: Vec<f64> = (0..in_dim).map(|i| ((i * 31 % 17) as f64) / 17.0 - 0.4).collect();
        let alpha = 0.37;
        let av: Vec<f64> = v.iter().map(|x| alpha * x).collect();
        let y = layers::fc_forward(&v, w, b).unwrap();
        let ya = layers::fc_forward(&av, w, b).unwrap();
        for ((ya_i, y_i), b_i) in ya.iter().zip(&y).zip(b) {
            let expect = alpha * y_i + (1.0 - alpha) * b_i;
            assert!((ya_i - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.mmnn");
        let spec = tiny_spec(32, 24, 64, 10);
        let net: Network<f32> = build_network(&spec, 11).unwrap();
        net.save(&path).unwrap();
        let back = Network::load(&path).unwrap();
        assert_eq!(back.spec, net.spec);
        for (a, b) in net.params.iter().zip(&back.params) {
            match (a, b) {
                (LayerParams::Conv { w: w1, b: b1 }, LayerParams::Conv { w: w2, b: b2 })
                | (LayerParams::Fc { w: w1, b: b1 }, LayerParams::Fc { w: w2, b: b2 }) => {
                    assert_eq!(w1.data(), w2.data());
                    assert_eq!(b1, b2);
                }
                (LayerParams::None, LayerParams::None) => {}
                _ => panic!("param kind mismatch"),
            }
        }
        let input = Tensor::from_fn(&[1, 32, 24], |i| ((i % 7) as f32) / 7.0);
        assert_eq!(
            net.extract_feature(&input).unwrap(),
            back.extract_feature(&input).unwrap()
        );
    }

    #[test]
    fn checkpoint_rejects_corrupt_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.mmnn");
        let spec = tiny_spec(32, 24, 16, 4);
        let net: Network<f32> = build_network(&spec, 1).unwrap();
        net.save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            Network::load(&path),
            Err(NetError::Checkpoint(_))
        ));
    }
}
