use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{ModelDims, ModelError, Modality};
use crate::rng::{stream_rng, Stream};
use crate::tensor::{Graph, Mat, Tensor};

/// `x · weight + bias` with `weight: in × out` and `bias: 1 × out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine<T = Mat> {
    pub weight: T,
    pub bias: T,
}

/// Two affine layers with a ReLU between them.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T = Mat> {
    pub first: Affine<T>,
    pub second: Affine<T>,
}

/// Angle prediction head: `weight: 1 × 2d`, `bias: 1 × 1`.
#[derive(Clone, Debug, PartialEq)]
pub struct AngleHead<T = Mat> {
    pub weight: T,
    pub bias: T,
}

/// One self-attention block of a context encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayer<T = Mat> {
    pub query: Affine<T>,
    pub key: Affine<T>,
    pub value: Affine<T>,
    pub output: Affine<T>,
    pub ff_in: Affine<T>,
    pub ff_out: Affine<T>,
}

/// Fully connected layer followed by a two-layer ReLU MLP.
#[derive(Clone, Debug, PartialEq)]
pub struct Classifier<T = Mat> {
    pub fc: Affine<T>,
    pub hidden: Affine<T>,
    pub out: Affine<T>,
}

/// Every learnable parameter of the network.
///
/// The type parameter lets the same tree hold plain values (`Mat`), graph
/// handles bound for one forward pass (`Tensor`), gradients, or optimizer
/// moments. [`ModelParams::visit`] walks the leaves in the fixed order used
/// by checkpoints and flat vectors:
///
/// 1. shared encoder (first weight, first bias, second weight, second bias)
/// 2. specific encoders for audio, text, visual (same layout each)
/// 3. angle head weight, then bias
/// 4. context encoders for audio, text, visual; per layer: query, key,
///    value, output, ff_in, ff_out, each weight then bias
/// 5. classifier fc, hidden, out, each weight then bias
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T = Mat> {
    pub dims: ModelDims,
    pub shared: Encoder<T>,
    pub specific: [Encoder<T>; 3],
    pub angle_head: AngleHead<T>,
    pub context: [Vec<AttentionLayer<T>>; 3],
    pub classifier: Classifier<T>,
}

impl<T> Affine<T> {
    pub fn map<U, F: FnMut(&T) -> U>(&self, f: &mut F) -> Affine<U> {
        Affine {
            weight: f(&self.weight),
            bias: f(&self.bias),
        }
    }

    fn visit<'a, F: FnMut(&'a T)>(&'a self, f: &mut F) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_mut<'a, F: FnMut(&'a mut T)>(&'a mut self, f: &mut F) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

impl<T> Encoder<T> {
    pub fn map<U, F: FnMut(&T) -> U>(&self, f: &mut F) -> Encoder<U> {
        Encoder {
            first: self.first.map(f),
            second: self.second.map(f),
        }
    }

    fn visit<'a, F: FnMut(&'a T)>(&'a self, f: &mut F) {
        self.first.visit(f);
        self.second.visit(f);
    }

    fn visit_mut<'a, F: FnMut(&'a mut T)>(&'a mut self, f: &mut F) {
        self.first.visit_mut(f);
        self.second.visit_mut(f);
    }
}

impl<T> AttentionLayer<T> {
    pub fn map<U, F: FnMut(&T) -> U>(&self, f: &mut F) -> AttentionLayer<U> {
        AttentionLayer {
            query: self.query.map(f),
            key: self.key.map(f),
            value: self.value.map(f),
            output: self.output.map(f),
            ff_in: self.ff_in.map(f),
            ff_out: self.ff_out.map(f),
        }
    }

    fn affines(&self) -> [&Affine<T>; 6] {
        [
            &self.query,
            &self.key,
            &self.value,
            &self.output,
            &self.ff_in,
            &self.ff_out,
        ]
    }

    fn visit<'a, F: FnMut(&'a T)>(&'a self, f: &mut F) {
        for a in self.affines() {
            a.visit(f);
        }
    }

    fn visit_mut<'a, F: FnMut(&'a mut T)>(&'a mut self, f: &mut F) {
        for a in [
            &mut self.query,
            &mut self.key,
            &mut self.value,
            &mut self.output,
            &mut self.ff_in,
            &mut self.ff_out,
        ] {
            a.visit_mut(f);
        }
    }
}

impl<T> Classifier<T> {
    pub fn map<U, F: FnMut(&T) -> U>(&self, f: &mut F) -> Classifier<U> {
        Classifier {
            fc: self.fc.map(f),
            hidden: self.hidden.map(f),
            out: self.out.map(f),
        }
    }
}

impl<T> ModelParams<T> {
    /// Applies `f` to every leaf in checkpoint order.
    pub fn map<U, F: FnMut(&T) -> U>(&self, mut f: F) -> ModelParams<U> {
        let f = &mut f;
        let shared = self.shared.map(f);
        let specific = [
            self.specific[0].map(f),
            self.specific[1].map(f),
            self.specific[2].map(f),
        ];
        let angle_head = AngleHead {
            weight: f(&self.angle_head.weight),
            bias: f(&self.angle_head.bias),
        };
        let mut context: [Vec<AttentionLayer<U>>; 3] = Default::default();
        for (dst, src) in context.iter_mut().zip(&self.context) {
            *dst = src.iter().map(|l| l.map(f)).collect();
        }
        let classifier = self.classifier.map(f);
        ModelParams {
            dims: self.dims,
            shared,
            specific,
            angle_head,
            context,
            classifier,
        }
    }

    pub fn visit<'a, F: FnMut(&'a T)>(&'a self, mut f: F) {
        let f = &mut f;
        self.shared.visit(f);
        for e in &self.specific {
            e.visit(f);
        }
        f(&self.angle_head.weight);
        f(&self.angle_head.bias);
        for layers in &self.context {
            for l in layers {
                l.visit(f);
            }
        }
        self.classifier.fc.visit(f);
        self.classifier.hidden.visit(f);
        self.classifier.out.visit(f);
    }

    pub fn visit_mut<'a, F: FnMut(&'a mut T)>(&'a mut self, mut f: F) {
        let f = &mut f;
        self.shared.visit_mut(f);
        for e in &mut self.specific {
            e.visit_mut(f);
        }
        f(&mut self.angle_head.weight);
        f(&mut self.angle_head.bias);
        for layers in &mut self.context {
            for l in layers {
                l.visit_mut(f);
            }
        }
        self.classifier.fc.visit_mut(f);
        self.classifier.hidden.visit_mut(f);
        self.classifier.out.visit_mut(f);
    }

    pub fn leaves(&self) -> Vec<&T> {
        let mut out = Vec::new();
        self.visit(|t| out.push(t));
        out
    }

    pub fn leaves_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::new();
        self.visit_mut(|t| out.push(t));
        out
    }

    pub fn specific(&self, m: Modality) -> &Encoder<T> {
        &self.specific[m.index()]
    }

    pub fn context(&self, m: Modality) -> &[AttentionLayer<T>] {
        &self.context[m.index()]
    }
}

fn uniform_affine(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Affine {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-bound..=bound)).collect() };
    Affine {
        weight: Mat::from_vec(fan_in, fan_out, draw(fan_in * fan_out)).expect("shape"),
        bias: Mat::row_vector(draw(fan_out)),
    }
}

fn zero_affine(fan_in: usize, fan_out: usize) -> Affine {
    Affine {
        weight: Mat::zeros(fan_in, fan_out),
        bias: Mat::zeros(1, fan_out),
    }
}

impl ModelParams<Mat> {
    fn build(dims: ModelDims, mut layer: impl FnMut(usize, usize) -> Affine) -> Self {
        let d = dims.d;
        let encoder = |layer: &mut dyn FnMut(usize, usize) -> Affine| Encoder {
            first: layer(d, d),
            second: layer(d, d),
        };
        let shared = encoder(&mut layer);
        let specific = [encoder(&mut layer), encoder(&mut layer), encoder(&mut layer)];
        let head = layer(2 * d, 1);
        let angle_head = AngleHead {
            weight: head.weight.transpose(),
            bias: head.bias,
        };
        let mut context: [Vec<AttentionLayer>; 3] = Default::default();
        for stack in context.iter_mut() {
            *stack = (0..dims.layers)
                .map(|_| AttentionLayer {
                    query: layer(d, d),
                    key: layer(d, d),
                    value: layer(d, d),
                    output: layer(d, d),
                    ff_in: layer(d, dims.d_ff),
                    ff_out: layer(dims.d_ff, d),
                })
                .collect();
        }
        let classifier = Classifier {
            fc: layer(6 * d, dims.d_c),
            hidden: layer(dims.d_c, dims.d_c),
            out: layer(dims.d_c, dims.num_classes),
        };
        ModelParams {
            dims,
            shared,
            specific,
            angle_head,
            context,
            classifier,
        }
    }

    /// Seeded initialization: every weight and bias of an affine layer is
    /// drawn from `U(-1/√fan_in, 1/√fan_in)`.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self, ModelError> {
        dims.validate()?;
        let mut rng = stream_rng(seed, Stream::Init);
        Ok(Self::build(dims, |i, o| uniform_affine(&mut rng, i, o)))
    }

    pub fn zeros(dims: ModelDims) -> Result<Self, ModelError> {
        dims.validate()?;
        Ok(Self::build(dims, zero_affine))
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(|m| n += m.len());
        n
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit(|m| out.extend_from_slice(m.data()));
        out
    }

    pub fn from_flat(dims: ModelDims, flat: &[f64]) -> Result<Self, ModelError> {
        let mut params = Self::zeros(dims)?;
        if flat.len() != params.param_count() {
            return Err(ModelError::InvalidDims(format!(
                "flat vector has {} values, model needs {}",
                flat.len(),
                params.param_count()
            )));
        }
        let mut offset = 0;
        params.visit_mut(|m| {
            let n = m.len();
            m.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        });
        Ok(params)
    }

    /// Registers every parameter as a leaf of `graph`.
    pub fn bind<'g>(&self, graph: &'g Graph, trainable: bool) -> ModelParams<Tensor<'g>> {
        self.map(|m| {
            if trainable {
                graph.param(m.clone())
            } else {
                graph.constant(m.clone())
            }
        })
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit(|m| ok &= m.is_finite());
        ok
    }
}

impl<'g> ModelParams<Tensor<'g>> {
    /// Gradients after backward, zero where a leaf was not reached.
    pub fn grads(&self) -> ModelParams<Mat> {
        self.map(|t| {
            t.grad().unwrap_or_else(|| {
                let (r, c) = t.shape();
                Mat::zeros(r, c)
            })
        })
    }
}
