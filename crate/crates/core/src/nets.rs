//! Full-residual encoder/decoder networks.
//!
//! Each encoder layer's activation is added to the pre-activation of its
//! mirrored decoder layer. An optional feature-wise attention gate with a
//! residual connection sits at the bottleneck, and every dense layer can use
//! weight normalization (unit column norm times a learned gain).

use std::fmt::Write as _;
use std::str::FromStr;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Mat, Tape, Var};

/// Widths used by the full-scale parameter network.
pub const FULL_PARAMETER_WIDTHS: [usize; 10] = [1024, 512, 320, 256, 128, 96, 64, 32, 16, 8];
/// Widths used by the full-scale estimation network.
pub const FULL_ESTIMATION_WIDTHS: [usize; 8] = [512, 320, 256, 128, 96, 64, 32, 16];
pub const DESK_PARAMETER_WIDTHS: [usize; 4] = [128, 64, 32, 16];
pub const DESK_ESTIMATION_WIDTHS: [usize; 3] = [64, 32, 16];

/// Transport coefficients per species: v_x, v_y, v_z, p_x, p_y, p_z, rho.
pub const THETA_PER_SPECIES: usize = 7;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("input width {got} does not match network input width {expected}")]
    WidthMismatch { expected: usize, got: usize },
    #[error("invalid topology: {0}")]
    Topology(String),
    #[error("snapshot parse error on line {line}: {msg}")]
    Snapshot { line: usize, msg: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Linear,
    Swish,
    Elu,
    Tanh,
    Sigmoid,
    Relu,
}

impl Activation {
    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Linear => "linear",
            Activation::Swish => "swish",
            Activation::Elu => "elu",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
            Activation::Relu => "relu",
        }
    }

    fn apply(self, tape: &mut Tape, x: Var) -> Var {
        match self {
            Activation::Linear => x,
            Activation::Swish => tape.swish(x),
            Activation::Elu => tape.elu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Sigmoid => tape.sigmoid(x),
            Activation::Relu => tape.relu(x),
        }
    }
}

impl FromStr for Activation {
    type Err = NetError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "linear" => Activation::Linear,
            "swish" => Activation::Swish,
            "elu" => Activation::Elu,
            "tanh" => Activation::Tanh,
            "sigmoid" => Activation::Sigmoid,
            "relu" => Activation::Relu,
            other => return Err(NetError::Topology(format!("unknown activation '{other}'"))),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkTopology {
    pub input_width: usize,
    pub encoder_widths: Vec<usize>,
    pub decoder_widths: Vec<usize>,
    /// One activation per hidden layer: encoder layers first, then decoder.
    pub activations: Vec<Activation>,
    pub attention: bool,
    pub weight_norm: bool,
    pub output_width: usize,
}

impl NetworkTopology {
    /// Encoder/decoder topology with the decoder mirrored from `encoder`.
    pub fn mirrored(
        input_width: usize,
        encoder: &[usize],
        encoder_act: Activation,
        decoder_act: Activation,
        output_width: usize,
    ) -> Self {
        let decoder: Vec<usize> = encoder.iter().rev().copied().collect();
        let mut activations = vec![encoder_act; encoder.len()];
        activations.extend(std::iter::repeat_n(decoder_act, decoder.len()));
        NetworkTopology {
            input_width,
            encoder_widths: encoder.to_vec(),
            decoder_widths: decoder,
            activations,
            attention: true,
            weight_norm: true,
            output_width,
        }
    }

    /// Parameter network: swish hidden layers, linear output.
    pub fn parameter_net(input_width: usize, encoder: &[usize], species: usize) -> Self {
        Self::mirrored(input_width, encoder, Activation::Swish, Activation::Swish, THETA_PER_SPECIES * species)
    }

    /// Estimation network: swish encoder, elu decoder, linear output.
    pub fn estimation_net(input_width: usize, encoder: &[usize], species: usize) -> Self {
        Self::mirrored(input_width, encoder, Activation::Swish, Activation::Elu, species)
    }

    pub fn validate(&self) -> Result<(), NetError> {
        if self.input_width == 0 || self.output_width == 0 {
            return Err(NetError::Topology("input and output widths must be positive".into()));
        }
        if self.encoder_widths.is_empty() || self.encoder_widths.contains(&0) {
            return Err(NetError::Topology("encoder widths must be nonempty and positive".into()));
        }
        let mirror: Vec<usize> = self.encoder_widths.iter().rev().copied().collect();
        if mirror != self.decoder_widths {
            return Err(NetError::Topology(format!(
                "decoder widths {:?} are not the mirror of encoder widths {:?}",
                self.decoder_widths, self.encoder_widths
            )));
        }
        if self.activations.len() != self.encoder_widths.len() + self.decoder_widths.len() {
            return Err(NetError::Topology("one activation per hidden layer is required".into()));
        }
        Ok(())
    }

    fn bottleneck(&self) -> usize {
        *self.encoder_widths.last().unwrap()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Dense {
    w: usize,
    b: usize,
    gain: Option<usize>,
}

/// Flat list of parameter tensors in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterSet {
    pub names: Vec<String>,
    pub tensors: Vec<Mat>,
}

impl ParameterSet {
    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    encoder: Vec<Dense>,
    decoder: Vec<Dense>,
    attention: Option<(Dense, Dense)>,
    output: Dense,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    topology: NetworkTopology,
    layout: Layout,
    pub params: ParameterSet,
}

/// Parameters of a network placed on a tape.
#[derive(Debug, Clone)]
pub struct BoundParams {
    /// Leaves, one per tensor in [`ParameterSet`] order.
    pub leaves: Vec<Var>,
    /// Effective weight per dense layer, keyed by the layer's `w` tensor index.
    effective: Vec<Option<Var>>,
}

/// Hidden activations recorded during [`Network::forward_trace`].
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub encoder: Vec<Var>,
    pub decoder: Vec<Var>,
    pub output: Var,
}

struct LayoutBuilder {
    names: Vec<String>,
    tensors: Vec<Mat>,
}

impl LayoutBuilder {
    fn dense(&mut self, name: &str, fan_in: usize, fan_out: usize, weight_norm: bool, rng: &mut ChaCha8Rng) -> Dense {
        let bound = (3.0 / fan_in as f64).sqrt();
        let w = Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-bound..bound));
        let gain = weight_norm.then(|| {
            let norms = w.map_axis(ndarray::Axis(0), |c| c.dot(&c).sqrt());
            norms.insert_axis(ndarray::Axis(0))
        });
        let wi = self.push(format!("{name}.w"), w);
        let bi = self.push(format!("{name}.b"), Array2::zeros((1, fan_out)));
        let gi = gain.map(|g| self.push(format!("{name}.g"), g));
        Dense { w: wi, b: bi, gain: gi }
    }

    fn push(&mut self, name: String, m: Mat) -> usize {
        self.names.push(name);
        self.tensors.push(m);
        self.tensors.len() - 1
    }
}

impl Network {
    pub fn new(topology: NetworkTopology, seed: u64) -> Result<Self, NetError> {
        topology.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut lb = LayoutBuilder { names: Vec::new(), tensors: Vec::new() };
        let wn = topology.weight_norm;
        let mut prev = topology.input_width;
        let mut encoder = Vec::new();
        for (i, &w) in topology.encoder_widths.iter().enumerate() {
            encoder.push(lb.dense(&format!("enc{i}"), prev, w, wn, &mut rng));
            prev = w;
        }
        let attention = topology.attention.then(|| {
            let k = topology.bottleneck();
            (lb.dense("att1", k, k, wn, &mut rng), lb.dense("att2", k, k, wn, &mut rng))
        });
        let mut decoder = Vec::new();
        for (i, &w) in topology.decoder_widths.iter().enumerate() {
            decoder.push(lb.dense(&format!("dec{i}"), prev, w, wn, &mut rng));
            prev = w;
        }
        let output = lb.dense("out", prev, topology.output_width, wn, &mut rng);
        Ok(Network {
            topology,
            layout: Layout { encoder, decoder, attention, output },
            params: ParameterSet { names: lb.names, tensors: lb.tensors },
        })
    }

    pub fn topology(&self) -> &NetworkTopology {
        &self.topology
    }

    pub fn input_width(&self) -> usize {
        self.topology.input_width
    }

    pub fn output_width(&self) -> usize {
        self.topology.output_width
    }

    fn denses(&self) -> impl Iterator<Item = &Dense> {
        let att = self.layout.attention.iter().flat_map(|(a, b)| [a, b]);
        self.layout
            .encoder
            .iter()
            .chain(att)
            .chain(self.layout.decoder.iter())
            .chain(std::iter::once(&self.layout.output))
    }

    /// Place the parameters on `tape`, as variables when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let leaves: Vec<Var> = self
            .params
            .tensors
            .iter()
            .map(|t| if trainable { tape.variable(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        let mut effective = vec![None; leaves.len()];
        for d in self.denses() {
            let v = leaves[d.w];
            let w = match d.gain {
                None => v,
                Some(gi) => {
                    let sq = tape.square(v);
                    let norms = tape.reduce_rows(sq);
                    let norms = tape.shift(norms, 1e-12);
                    let inv = tape.powf(norms, -0.5);
                    let scale = tape.mul(leaves[gi], inv);
                    tape.mul_row(v, scale)
                }
            };
            effective[d.w] = Some(w);
        }
        BoundParams { leaves, effective }
    }

    fn affine(&self, tape: &mut Tape, p: &BoundParams, d: &Dense, x: Var) -> Var {
        let w = p.effective[d.w].expect("dense weight bound");
        let h = tape.matmul(x, w);
        tape.add_row(h, p.leaves[d.b])
    }

    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, input: Var) -> Result<Var, NetError> {
        Ok(self.forward_trace(tape, p, input)?.output)
    }

    pub fn forward_trace(&self, tape: &mut Tape, p: &BoundParams, input: Var) -> Result<ForwardTrace, NetError> {
        let got = tape.value(input).ncols();
        if got != self.topology.input_width {
            return Err(NetError::WidthMismatch { expected: self.topology.input_width, got });
        }
        let acts = &self.topology.activations;
        let n_enc = self.layout.encoder.len();
        let mut h = input;
        let mut encoder = Vec::with_capacity(n_enc);
        for (i, d) in self.layout.encoder.iter().enumerate() {
            let a = self.affine(tape, p, d, h);
            h = acts[i].apply(tape, a);
            encoder.push(h);
        }
        if let Some((g1, g2)) = &self.layout.attention {
            let a = self.affine(tape, p, g1, h);
            let a = tape.tanh(a);
            let s = self.affine(tape, p, g2, a);
            let gate = tape.softmax(s);
            let gated = tape.mul(h, gate);
            h = tape.add(h, gated);
        }
        let mut decoder = Vec::with_capacity(self.layout.decoder.len());
        for (j, d) in self.layout.decoder.iter().enumerate() {
            let a = self.affine(tape, p, d, h);
            let skip = encoder[n_enc - 1 - j];
            let a = tape.add(a, skip);
            h = acts[n_enc + j].apply(tape, a);
            decoder.push(h);
        }
        let output = self.affine(tape, p, &self.layout.output, h);
        Ok(ForwardTrace { encoder, decoder, output })
    }

    /// Forward pass on plain inputs with no gradient bookkeeping.
    pub fn predict(&self, input: &Mat) -> Result<Mat, NetError> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let x = tape.constant(input.clone());
        let y = self.forward(&mut tape, &p, x)?;
        Ok(tape.value(y).clone())
    }

    /// Text snapshot: a topology header followed by every tensor, row-major.
    pub fn to_snapshot(&self) -> String {
        let t = &self.topology;
        let join = |v: &[usize]| v.iter().map(|w| w.to_string()).collect::<Vec<_>>().join(" ");
        let mut s = String::new();
        writeln!(s, "jpinn-network v1").unwrap();
        writeln!(s, "input_width {}", t.input_width).unwrap();
        writeln!(s, "encoder {}", join(&t.encoder_widths)).unwrap();
        writeln!(s, "decoder {}", join(&t.decoder_widths)).unwrap();
        let acts: Vec<&str> = t.activations.iter().map(|a| a.as_str()).collect();
        writeln!(s, "activations {}", acts.join(" ")).unwrap();
        writeln!(s, "attention {}", u8::from(t.attention)).unwrap();
        writeln!(s, "weight_norm {}", u8::from(t.weight_norm)).unwrap();
        writeln!(s, "output_width {}", t.output_width).unwrap();
        writeln!(s, "tensors {}", self.params.tensors.len()).unwrap();
        for (name, m) in self.params.names.iter().zip(&self.params.tensors) {
            writeln!(s, "tensor {name} {} {}", m.nrows(), m.ncols()).unwrap();
            for row in m.rows() {
                let vals: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
                writeln!(s, "{}", vals.join(" ")).unwrap();
            }
        }
        s
    }

    pub fn from_snapshot(text: &str) -> Result<Self, NetError> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let err = |line: usize, msg: &str| NetError::Snapshot { line, msg: msg.to_string() };
        fn keyed<'a>(
            lines: &mut impl Iterator<Item = (usize, &'a str)>,
            key: &str,
        ) -> Result<(usize, Vec<String>), NetError> {
            let (ln, l) = lines
                .next()
                .ok_or_else(|| NetError::Snapshot { line: 0, msg: "unexpected end of snapshot".into() })?;
            let mut parts = l.split_whitespace();
            if parts.next() != Some(key) {
                return Err(NetError::Snapshot { line: ln, msg: format!("expected '{key}'") });
            }
            Ok((ln, parts.map(str::to_string).collect()))
        }
        let mut next = |key: &str| keyed(&mut lines, key);
        let (ln, magic) = next("jpinn-network")?;
        if magic != ["v1"] {
            return Err(err(ln, "unsupported snapshot version"));
        }
        let parse_usize = |ln: usize, v: &[String]| -> Result<Vec<usize>, NetError> {
            v.iter().map(|x| x.parse().map_err(|_| err(ln, "bad integer"))).collect()
        };
        let one = |ln: usize, v: Vec<usize>| v.first().copied().ok_or_else(|| err(ln, "missing value"));
        let (ln, v) = next("input_width")?;
        let input_width = one(ln, parse_usize(ln, &v)?)?;
        let (ln, v) = next("encoder")?;
        let encoder_widths = parse_usize(ln, &v)?;
        let (ln, v) = next("decoder")?;
        let decoder_widths = parse_usize(ln, &v)?;
        let (_, v) = next("activations")?;
        let activations = v.iter().map(|a| a.parse()).collect::<Result<Vec<Activation>, _>>()?;
        let (ln, v) = next("attention")?;
        let attention = one(ln, parse_usize(ln, &v)?)? == 1;
        let (ln, v) = next("weight_norm")?;
        let weight_norm = one(ln, parse_usize(ln, &v)?)? == 1;
        let (ln, v) = next("output_width")?;
        let output_width = one(ln, parse_usize(ln, &v)?)?;
        let topology = NetworkTopology {
            input_width,
            encoder_widths,
            decoder_widths,
            activations,
            attention,
            weight_norm,
            output_width,
        };
        let mut net = Network::new(topology, 0)?;
        let (ln, v) = next("tensors")?;
        if one(ln, parse_usize(ln, &v)?)? != net.params.tensors.len() {
            return Err(err(ln, "tensor count does not match topology"));
        }
        for k in 0..net.params.tensors.len() {
            let (ln, v) = keyed(&mut lines, "tensor")?;
            if v.len() != 3 || v[0] != net.params.names[k] {
                return Err(err(ln, &format!("expected tensor {}", net.params.names[k])));
            }
            let dims = parse_usize(ln, &v[1..])?;
            let shape = net.params.tensors[k].dim();
            if (dims[0], dims[1]) != shape {
                return Err(err(ln, "tensor shape does not match topology"));
            }
            let mut m = Array2::zeros(shape);
            for r in 0..shape.0 {
                let (ln, l) = lines.next().ok_or_else(|| err(0, "unexpected end of snapshot"))?;
                let vals: Vec<f64> = l
                    .split_whitespace()
                    .map(|x| x.parse().map_err(|_| err(ln, "bad number")))
                    .collect::<Result<_, _>>()?;
                if vals.len() != shape.1 {
                    return Err(err(ln, "row length mismatch"));
                }
                for (c, x) in vals.into_iter().enumerate() {
                    m[(r, c)] = x;
                }
            }
            net.params.tensors[k] = m;
        }
        Ok(net)
    }
}

/// Paper-scale parameter network emitting the 14 transport coefficients.
pub fn build_parameter_net(input_width: usize, seed: u64) -> Result<Network, NetError> {
    Network::new(NetworkTopology::parameter_net(input_width, &FULL_PARAMETER_WIDTHS, 2), seed)
}

/// Paper-scale estimation network emitting log NO2 and log NOx.
pub fn build_estimation_net(input_width: usize, seed: u64) -> Result<Network, NetError> {
    Network::new(NetworkTopology::estimation_net(input_width, &FULL_ESTIMATION_WIDTHS, 2), seed)
}
