//! Recurrent value-gradient network.
//!
//! A stack of LSTM layers reads the current state at every tick and a linear
//! head turns the top hidden vector into an estimate of `V_x`. Two small tanh
//! networks consume the initial state: one predicts the initial value `V^0`,
//! the other the initial hidden and cell vectors of every layer. The same
//! parameters serve every tick of a rollout.

use std::fs;
use std::io;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::lipm::LipmState;
use crate::tensor::{Eager, Graph, Matrix};

pub const STATE_DIM: usize = 4;
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FBSD";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("checkpoint i/o: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
    #[error("architecture mismatch: checkpoint has {found}, expected {expected}")]
    ArchitectureMismatch { expected: String, found: String },
    #[error("invalid architecture: {0}")]
    InvalidArchitecture(String),
}

/// Shape of the network; everything else follows from it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetConfig {
    pub layers: usize,
    pub hidden: usize,
    pub v0_width: usize,
    pub h0_width: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            hidden: 16,
            v0_width: 16,
            h0_width: 16,
        }
    }
}

impl std::fmt::Display for NetConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "layers={} hidden={} v0_width={} h0_width={}",
            self.layers, self.hidden, self.v0_width, self.h0_width
        )
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<(), NetError> {
        if self.layers == 0 || self.hidden == 0 || self.v0_width == 0 || self.h0_width == 0 {
            return Err(NetError::InvalidArchitecture(format!(
                "all sizes must be >= 1 ({self})"
            )));
        }
        Ok(())
    }

    fn layer_input(&self, layer: usize) -> usize {
        if layer == 0 {
            STATE_DIM
        } else {
            self.hidden
        }
    }

    /// Weights and biases of the LSTM stack alone.
    pub fn lstm_param_count(&self) -> usize {
        (0..self.layers)
            .map(|l| 4 * (self.hidden * (self.layer_input(l) + self.hidden) + self.hidden))
            .sum()
    }
}

/// Gate blocks are stacked `[input, forget, candidate, output]` along rows.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer {
    pub weight: Matrix,
    pub bias: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Matrix,
    pub bias: Matrix,
}

/// One tanh hidden layer followed by a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub hidden: Linear,
    pub out: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetParams {
    config: NetConfig,
    pub lstm: Vec<LstmLayer>,
    pub vx_head: Linear,
    pub v0_head: FeedForward,
    pub h0_head: FeedForward,
}

fn uniform(rng: &mut ChaCha8Rng, rows: usize, cols: usize, fan_in: usize) -> Matrix {
    let bound = 1.0 / (fan_in as f64).sqrt();
    Matrix::from_vec(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-bound..bound)).collect(),
    )
}

impl NetParams {
    /// Uniform `±1/sqrt(fan_in)` weights, forget-gate bias 1, other biases 0.
    pub fn init(seed: u64, config: NetConfig) -> Result<Self, NetError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let h = config.hidden;
        let lstm = (0..config.layers)
            .map(|l| {
                let fan_in = config.layer_input(l) + h;
                let weight = uniform(&mut rng, 4 * h, fan_in, fan_in);
                let mut bias = Matrix::zeros(4 * h, 1);
                for r in h..2 * h {
                    bias.set(r, 0, 1.0);
                }
                LstmLayer { weight, bias }
            })
            .collect();
        let vx_head = Linear {
            weight: uniform(&mut rng, STATE_DIM, h, h),
            bias: Matrix::zeros(STATE_DIM, 1),
        };
        let mut ff = |width: usize, out: usize| FeedForward {
            hidden: Linear {
                weight: uniform(&mut rng, width, STATE_DIM, STATE_DIM),
                bias: Matrix::zeros(width, 1),
            },
            out: Linear {
                weight: uniform(&mut rng, out, width, width),
                bias: Matrix::zeros(out, 1),
            },
        };
        let v0_head = ff(config.v0_width, 1);
        let h0_head = ff(config.h0_width, 2 * config.layers * h);
        Ok(Self {
            config,
            lstm,
            vx_head,
            v0_head,
            h0_head,
        })
    }

    pub fn config(&self) -> NetConfig {
        self.config
    }

    /// Every trainable tensor in declaration order: LSTM layers, `V_x` head,
    /// `V^0` head, `H_0` head.
    pub fn tensors(&self) -> Vec<&Matrix> {
        let mut out = Vec::new();
        for l in &self.lstm {
            out.push(&l.weight);
            out.push(&l.bias);
        }
        out.push(&self.vx_head.weight);
        out.push(&self.vx_head.bias);
        for ff in [&self.v0_head, &self.h0_head] {
            out.push(&ff.hidden.weight);
            out.push(&ff.hidden.bias);
            out.push(&ff.out.weight);
            out.push(&ff.out.bias);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        for l in &mut self.lstm {
            out.push(&mut l.weight);
            out.push(&mut l.bias);
        }
        out.push(&mut self.vx_head.weight);
        out.push(&mut self.vx_head.bias);
        for ff in [&mut self.v0_head, &mut self.h0_head] {
            out.push(&mut ff.hidden.weight);
            out.push(&mut ff.hidden.bias);
            out.push(&mut ff.out.weight);
            out.push(&mut ff.out.bias);
        }
        out
    }

    /// Number of leading tensors that make up the `V_x` network (LSTM stack
    /// plus its head); these are the regularized weights.
    pub fn theta_tensor_count(&self) -> usize {
        2 * self.config.layers + 2
    }

    pub fn theta_sum_squares(&self) -> f64 {
        self.tensors()[..self.theta_tensor_count()]
            .iter()
            .map(|m| m.sum_squares())
            .sum()
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|m| m.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|m| m.is_finite())
    }

    /// Sets every weight and bias to zero.
    pub fn zeroed(mut self) -> Self {
        for m in self.tensors_mut() {
            m.data_mut().fill(0.0);
        }
        self
    }

    /// Registers every tensor as a parameter of `g`, in declaration order.
    pub fn bind<G: Graph>(&self, g: &G) -> BoundNet<G::Node> {
        let lin = |l: &Linear| (g.param(&l.weight), g.param(&l.bias));
        let lstm = self.lstm.iter().map(|l| (g.param(&l.weight), g.param(&l.bias))).collect();
        let vx = lin(&self.vx_head);
        let ff = |f: &FeedForward| {
            let (w1, b1) = lin(&f.hidden);
            let (w2, b2) = lin(&f.out);
            [w1, b1, w2, b2]
        };
        BoundNet {
            hidden: self.config.hidden,
            lstm,
            vx,
            v0: ff(&self.v0_head),
            h0: ff(&self.h0_head),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let c = self.config;
        let mut out = Vec::with_capacity(32 + 8 * self.param_count());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        for v in [
            CHECKPOINT_VERSION,
            STATE_DIM as u32,
            c.layers as u32,
            c.hidden as u32,
            c.v0_width as u32,
            c.h0_width as u32,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.param_count() as u64).to_le_bytes());
        for m in self.tensors() {
            for v in m.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NetError> {
        let header = CheckpointHeader::parse(bytes)?;
        let mut params = NetParams::init(0, header.config)?;
        let body = &bytes[CheckpointHeader::LEN..];
        let expected = header.param_count * 8;
        if header.param_count != params.param_count() {
            return Err(NetError::ArchitectureMismatch {
                expected: format!("{} parameters for {}", params.param_count(), header.config),
                found: format!("{} parameters", header.param_count),
            });
        }
        if body.len() < expected {
            return Err(NetError::Truncated {
                expected: CheckpointHeader::LEN + expected,
                found: bytes.len(),
            });
        }
        let mut chunks = body.chunks_exact(8);
        for m in params.tensors_mut() {
            for v in m.data_mut() {
                let raw = chunks.next().expect("length checked above");
                *v = f64::from_le_bytes(raw.try_into().expect("chunk of 8"));
            }
        }
        Ok(params)
    }

    pub fn save(&self, path: &Path) -> Result<(), NetError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NetError> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Loads a checkpoint and insists on a specific architecture.
    pub fn load_expecting(path: &Path, expected: NetConfig) -> Result<Self, NetError> {
        let params = Self::load(path)?;
        if params.config != expected {
            return Err(NetError::ArchitectureMismatch {
                expected: expected.to_string(),
                found: params.config.to_string(),
            });
        }
        Ok(params)
    }
}

/// Fixed-size header at the front of every checkpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CheckpointHeader {
    pub version: u32,
    pub state_dim: usize,
    pub config: NetConfig,
    pub param_count: usize,
}

impl CheckpointHeader {
    pub const LEN: usize = 4 + 6 * 4 + 8;

    pub fn parse(bytes: &[u8]) -> Result<Self, NetError> {
        if bytes.len() < 8 {
            return Err(NetError::Truncated {
                expected: Self::LEN,
                found: bytes.len(),
            });
        }
        if &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(NetError::BadMagic);
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        let version = word(0);
        if version != CHECKPOINT_VERSION {
            return Err(NetError::UnsupportedVersion(version));
        }
        if bytes.len() < Self::LEN {
            return Err(NetError::Truncated {
                expected: Self::LEN,
                found: bytes.len(),
            });
        }
        let state_dim = word(1) as usize;
        if state_dim != STATE_DIM {
            return Err(NetError::ArchitectureMismatch {
                expected: format!("state dimension {STATE_DIM}"),
                found: format!("state dimension {state_dim}"),
            });
        }
        let config = NetConfig {
            layers: word(2) as usize,
            hidden: word(3) as usize,
            v0_width: word(4) as usize,
            h0_width: word(5) as usize,
        };
        config.validate()?;
        let param_count = u64::from_le_bytes(bytes[28..36].try_into().unwrap()) as usize;
        Ok(Self {
            version,
            state_dim,
            config,
            param_count,
        })
    }

    pub fn read(path: &Path) -> Result<Self, NetError> {
        let bytes = fs::read(path)?;
        Self::parse(&bytes)
    }
}

impl std::fmt::Display for CheckpointHeader {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "format:      FBSD v{}", self.version)?;
        writeln!(f, "state_dim:   {}", self.state_dim)?;
        writeln!(f, "layers:      {}", self.config.layers)?;
        writeln!(f, "hidden:      {}", self.config.hidden)?;
        writeln!(f, "v0_width:    {}", self.config.v0_width)?;
        writeln!(f, "h0_width:    {}", self.config.h0_width)?;
        write!(f, "parameters:  {}", self.param_count)
    }
}

/// Hidden and cell vectors of each layer, `hidden x M` per entry.
#[derive(Debug, Clone)]
pub struct LstmState<N> {
    pub h: Vec<N>,
    pub c: Vec<N>,
}

/// Network parameters registered on a particular [`Graph`].
pub struct BoundNet<N> {
    hidden: usize,
    lstm: Vec<(N, N)>,
    vx: (N, N),
    v0: [N; 4],
    h0: [N; 4],
}

impl<N: Clone> BoundNet<N> {
    /// The `V_x` network's tensors (LSTM stack and head), the regularized set.
    pub fn theta(&self) -> Vec<N> {
        let mut out = Vec::with_capacity(2 * self.lstm.len() + 2);
        for (w, b) in &self.lstm {
            out.push(w.clone());
            out.push(b.clone());
        }
        out.push(self.vx.0.clone());
        out.push(self.vx.1.clone());
        out
    }

    fn feed_forward<G: Graph<Node = N>>(g: &G, w: &[N; 4], x: &N) -> N {
        let a = g.tanh(&g.add_col(&g.matmul(&w[0], x), &w[1]));
        g.add_col(&g.matmul(&w[2], &a), &w[3])
    }

    /// `V^0` (`1 x M`) and the initial recurrent state from the initial states
    /// (`4 x M`).
    pub fn initial<G: Graph<Node = N>>(&self, g: &G, x0: &N) -> (N, LstmState<N>) {
        let v0 = Self::feed_forward(g, &self.v0, x0);
        let packed = g.tanh(&Self::feed_forward(g, &self.h0, x0));
        let h = self.hidden;
        let layers = self.lstm.len();
        let mut state = LstmState {
            h: Vec::with_capacity(layers),
            c: Vec::with_capacity(layers),
        };
        for l in 0..layers {
            state.h.push(g.slice_rows(&packed, 2 * l * h, h));
            state.c.push(g.slice_rows(&packed, (2 * l + 1) * h, h));
        }
        (v0, state)
    }

    /// One recurrent tick: returns `V_x` (`4 x M`) and the next state.
    pub fn step<G: Graph<Node = N>>(&self, g: &G, x: &N, s: &LstmState<N>) -> (N, LstmState<N>) {
        let h = self.hidden;
        let mut input = x.clone();
        let mut next = LstmState {
            h: Vec::with_capacity(self.lstm.len()),
            c: Vec::with_capacity(self.lstm.len()),
        };
        for (l, (w, b)) in self.lstm.iter().enumerate() {
            let z = g.add_col(&g.matmul(w, &g.concat_rows(&[input, s.h[l].clone()])), b);
            let i = g.sigmoid(&g.slice_rows(&z, 0, h));
            let f = g.sigmoid(&g.slice_rows(&z, h, h));
            let cand = g.tanh(&g.slice_rows(&z, 2 * h, h));
            let o = g.sigmoid(&g.slice_rows(&z, 3 * h, h));
            let c = g.add(&g.mul(&f, &s.c[l]), &g.mul(&i, &cand));
            let hh = g.mul(&o, &g.tanh(&c));
            next.c.push(c);
            next.h.push(hh.clone());
            input = hh;
        }
        let vx = g.add_col(&g.matmul(&self.vx.0, &input), &self.vx.1);
        (vx, next)
    }
}

/// Single-state convenience wrappers over the eager backend.
pub fn initial_heads(x0: &LipmState, params: &NetParams) -> (f64, LstmState<Matrix>) {
    let net = params.bind(&Eager);
    let (v0, s) = net.initial(&Eager, &Matrix::column(&x0.to_array()));
    (v0.item(), s)
}

pub fn lstm_step(x: &LipmState, s: &LstmState<Matrix>, params: &NetParams) -> ([f64; 4], LstmState<Matrix>) {
    let net = params.bind(&Eager);
    let (vx, next) = net.step(&Eager, &Matrix::column(&x.to_array()), s);
    let d = vx.data();
    ([d[0], d[1], d[2], d[3]], next)
}
