//! Stacked MAAT blocks: sparse attention, state-space skip path, adaptive
//! gate, feed-forward sublayer and a reconstruction head.

use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{self, dropout, AttentionConfig, AttentionMaps, AttentionVars, ForwardCtx};
use crate::data::NormStats;
use crate::error::{MaatError, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{uniform_fan_in, BoundParams, ParamStore};
use crate::ssm::{self, SsmConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub window: usize,
    pub input_dim: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub e_layers: usize,
    pub block_size: usize,
    pub d_state: usize,
    pub d_conv: usize,
    pub expand: usize,
    pub dropout: f64,
    pub final_norm: bool,
    /// Scale attention scores by `1/sqrt(d_model)` instead of `1/sqrt(d_head)`.
    pub scale_by_d_model: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            window: 100,
            input_dim: 1,
            d_model: 512,
            n_heads: 8,
            e_layers: 3,
            block_size: 20,
            d_state: 16,
            d_conv: 4,
            expand: 2,
            dropout: 0.0,
            final_norm: true,
            scale_by_d_model: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("window", self.window),
            ("input_dim", self.input_dim),
            ("e_layers", self.e_layers),
        ] {
            if v == 0 {
                return Err(MaatError::Config(format!("{name} must be at least 1")));
            }
        }
        self.attention().validate()?;
        self.ssm().validate()
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            block_size: self.block_size,
            dropout: self.dropout,
            scale_by_d_model: self.scale_by_d_model,
        }
    }

    pub fn ssm(&self) -> SsmConfig {
        SsmConfig {
            d_model: self.d_model,
            d_state: self.d_state,
            d_conv: self.d_conv,
            expand: self.expand,
        }
    }

    pub fn ffn_width(&self) -> usize {
        4 * self.d_model
    }

    /// Number of learnable scalars, computed from the dimensions alone.
    pub fn param_count(&self) -> usize {
        let (d, dm, h) = (self.input_dim, self.d_model, self.n_heads);
        let s = self.ssm();
        let (e, n, r, k) = (s.d_inner(), s.d_state, s.dt_rank(), s.d_conv);
        let attn = 4 * (dm * dm + dm) + dm * h + h + 2 * dm;
        let ssm = dm * 2 * e + e * k + e + e * (r + 2 * n) + r * e + e + e * n + e + e * dm;
        let gate = 2 * dm * dm + dm;
        let ffn = dm * self.ffn_width() + self.ffn_width() + self.ffn_width() * dm + dm;
        let layer = attn + ssm + 2 * dm + gate + ffn + 2 * dm;
        let final_norm = if self.final_norm { 2 * dm } else { 0 };
        d * dm + dm + self.e_layers * layer + final_norm + dm * d + d
    }

    /// `key = value` lines, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("window", self.window.to_string()),
            ("input_dim", self.input_dim.to_string()),
            ("d_model", self.d_model.to_string()),
            ("n_heads", self.n_heads.to_string()),
            ("e_layers", self.e_layers.to_string()),
            ("block_size", self.block_size.to_string()),
            ("d_state", self.d_state.to_string()),
            ("d_conv", self.d_conv.to_string()),
            ("expand", self.expand.to_string()),
            ("dropout", self.dropout.to_string()),
            ("final_norm", self.final_norm.to_string()),
            ("scale_by_d_model", self.scale_by_d_model.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    /// Sets one field from its text form. Returns `false` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .trim()
                .parse()
                .map_err(|_| MaatError::Config(format!("invalid value '{value}' for {key}")))
        }
        match key {
            "window" => self.window = parse(key, value)?,
            "input_dim" => self.input_dim = parse(key, value)?,
            "d_model" => self.d_model = parse(key, value)?,
            "n_heads" => self.n_heads = parse(key, value)?,
            "e_layers" => self.e_layers = parse(key, value)?,
            "block_size" => self.block_size = parse(key, value)?,
            "d_state" => self.d_state = parse(key, value)?,
            "d_conv" => self.d_conv = parse(key, value)?,
            "expand" => self.expand = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "final_norm" => self.final_norm = parse(key, value)?,
            "scale_by_d_model" => self.scale_by_d_model = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Fixed sinusoidal position table `[len, d]`.
pub fn sinusoidal_encoding(len: usize, d: usize) -> Tensor {
    let mut pe = vec![0.0; len * d];
    for pos in 0..len {
        for i in (0..d).step_by(2) {
            let angle = pos as f64 / 10000f64.powf(i as f64 / d as f64);
            pe[pos * d + i] = angle.sin();
            if i + 1 < d {
                pe[pos * d + i + 1] = angle.cos();
            }
        }
    }
    Tensor::new(vec![len, d], pe).expect("encoding shape")
}

/// Configuration plus named parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub store: ParamStore,
}

impl ModelParams {
    /// Deterministic initialization from `config.seed`.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, dm) = (config.input_dim, config.d_model);
        let mut store = ParamStore::new();
        store.insert("embed.w", uniform_fan_in(&mut rng, &[d, dm], d));
        store.insert("embed.b", Tensor::zeros(&[dm]));
        let (attn, ssm_cfg) = (config.attention(), config.ssm());
        for l in 0..config.e_layers {
            attention::init_params(&mut store, &format!("layers.{l}.attn"), &attn, &mut rng);
            ssm::init_params(&mut store, &format!("layers.{l}.ssm"), &ssm_cfg, &mut rng);
            store.insert(format!("layers.{l}.skip_ln.g"), Tensor::full(&[dm], 1.0));
            store.insert(format!("layers.{l}.skip_ln.b"), Tensor::zeros(&[dm]));
            store.insert(
                format!("layers.{l}.gate.w"),
                uniform_fan_in(&mut rng, &[2 * dm, dm], 2 * dm),
            );
            store.insert(format!("layers.{l}.gate.b"), Tensor::zeros(&[dm]));
            let f = config.ffn_width();
            store.insert(format!("layers.{l}.ffn.w1"), uniform_fan_in(&mut rng, &[dm, f], dm));
            store.insert(format!("layers.{l}.ffn.b1"), Tensor::zeros(&[f]));
            store.insert(format!("layers.{l}.ffn.w2"), uniform_fan_in(&mut rng, &[f, dm], f));
            store.insert(format!("layers.{l}.ffn.b2"), Tensor::zeros(&[dm]));
            store.insert(format!("layers.{l}.ffn_ln.g"), Tensor::full(&[dm], 1.0));
            store.insert(format!("layers.{l}.ffn_ln.b"), Tensor::zeros(&[dm]));
        }
        if config.final_norm {
            store.insert("final_ln.g", Tensor::full(&[dm], 1.0));
            store.insert("final_ln.b", Tensor::zeros(&[dm]));
        }
        store.insert("out.w", uniform_fan_in(&mut rng, &[dm, d], dm));
        store.insert("out.b", Tensor::zeros(&[d]));
        Ok(ModelParams {
            config: config.clone(),
            store,
        })
    }

    /// Inference forward pass on concrete values (no dropout, no gradients).
    pub fn forward(&self, x: &Tensor) -> Result<ForwardOutput> {
        let mut tape = Tape::new();
        let bound = self.store.bind(&mut tape, false)?;
        let xv = tape.constant(x.clone())?;
        let out = forward(&mut tape, xv, &self.config, &bound, &mut ForwardCtx::eval())?;
        Ok(out.values(&tape))
    }
}

/// Gate `g = sigmoid([x; x_skip] W + b)` and blend
/// `x_adapt = g * x_skip + (1 - g) * x`.
pub fn gate(tape: &mut Tape, x: Var, x_skip: Var, params: &BoundParams, prefix: &str) -> Result<(Var, Var)> {
    if tape.value(x).shape() != tape.value(x_skip).shape() {
        return Err(MaatError::Dimension(format!(
            "gate inputs {:?} vs {:?}",
            tape.value(x).shape(),
            tape.value(x_skip).shape()
        )));
    }
    let p = params.scope(prefix);
    let cat = tape.concat_last(&[x, x_skip])?;
    let logits = tape.linear(cat, p.var("w")?, Some(p.var("b")?))?;
    let g = tape.sigmoid(logits)?;
    let keep = tape.scale(g, -1.0)?;
    let keep = tape.add_scalar(keep, 1.0)?;
    let from_skip = tape.mul(g, x_skip)?;
    let from_attn = tape.mul(keep, x)?;
    let x_adapt = tape.add(from_skip, from_attn)?;
    Ok((x_adapt, g))
}

/// Intermediate activations of one block.
#[derive(Debug, Clone, Copy)]
pub struct BlockVars {
    /// Block output, also the next block's `x_orig`.
    pub x_next: Var,
    /// Attention-path output.
    pub x_attn: Var,
    pub x_skip: Var,
    /// Gated blend, before the feed-forward sublayer.
    pub x_adapt: Var,
    pub g: Var,
    pub maps: AttentionVars,
}

/// One block of layer `layer`.
#[allow(clippy::too_many_arguments)]
pub fn maat_block(
    tape: &mut Tape,
    x: Var,
    x_orig: Var,
    cfg: &ModelConfig,
    params: &BoundParams,
    layer: usize,
    ctx: &mut ForwardCtx<'_>,
) -> Result<BlockVars> {
    if tape.value(x).shape() != tape.value(x_orig).shape() {
        return Err(MaatError::Dimension(format!(
            "block inputs {:?} vs {:?}",
            tape.value(x).shape(),
            tape.value(x_orig).shape()
        )));
    }
    let pre = format!("layers.{layer}");
    let p = params.scope(&pre);
    let (x_attn, maps) =
        attention::anomaly_sparse_attention(tape, x, &cfg.attention(), params, &format!("{pre}.attn"), ctx)?;
    let x_mamba = ssm::mamba_block(tape, x_attn, &cfg.ssm(), params, &format!("{pre}.ssm"))?;
    let res = tape.add(x_mamba, x_orig)?;
    let x_skip = tape.layer_norm(res, p.var("skip_ln.g")?, p.var("skip_ln.b")?)?;
    let (x_adapt, g) = gate(tape, x_attn, x_skip, params, &format!("{pre}.gate"))?;

    let h = tape.linear(x_adapt, p.var("ffn.w1")?, Some(p.var("ffn.b1")?))?;
    let h = tape.gelu(h)?;
    let h = dropout(tape, h, cfg.dropout, ctx)?;
    let h = tape.linear(h, p.var("ffn.w2")?, Some(p.var("ffn.b2")?))?;
    let res = tape.add(x_adapt, h)?;
    let x_next = tape.layer_norm(res, p.var("ffn_ln.g")?, p.var("ffn_ln.b")?)?;
    Ok(BlockVars {
        x_next,
        x_attn,
        x_skip,
        x_adapt,
        g,
        maps,
    })
}

/// Tape handles of a full forward pass.
#[derive(Debug, Clone)]
pub struct ForwardVars {
    /// `[B, W, d]`
    pub recon: Var,
    pub blocks: Vec<BlockVars>,
}

impl ForwardVars {
    pub fn maps(&self) -> impl Iterator<Item = &AttentionVars> {
        self.blocks.iter().map(|b| &b.maps)
    }

    pub fn values(&self, tape: &Tape) -> ForwardOutput {
        ForwardOutput {
            recon: tape.value(self.recon).clone(),
            maps: self.maps().map(|m| m.values(tape)).collect(),
        }
    }
}

/// Reconstruction and per-layer attention maps.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub recon: Tensor,
    pub maps: Vec<AttentionMaps>,
}

impl ForwardOutput {
    pub fn series_list(&self) -> Vec<&Tensor> {
        self.maps.iter().map(|m| &m.series).collect()
    }

    pub fn prior_list(&self) -> Vec<&Tensor> {
        self.maps.iter().map(|m| &m.prior).collect()
    }

    pub fn sigma_list(&self) -> Vec<&Tensor> {
        self.maps.iter().map(|m| &m.sigma).collect()
    }
}

/// Full network over `x: [B, W, d]`.
pub fn forward(
    tape: &mut Tape,
    x: Var,
    cfg: &ModelConfig,
    params: &BoundParams,
    ctx: &mut ForwardCtx<'_>,
) -> Result<ForwardVars> {
    let shape = tape.value(x).shape().to_vec();
    if shape.len() != 3 || shape[1] != cfg.window || shape[2] != cfg.input_dim {
        return Err(MaatError::Dimension(format!(
            "model input {:?} does not match window {} and input_dim {}",
            shape, cfg.window, cfg.input_dim
        )));
    }
    let (b, w, dm) = (shape[0], shape[1], cfg.d_model);
    let emb = tape.linear(x, params.var("embed.w")?, Some(params.var("embed.b")?))?;
    let pe = sinusoidal_encoding(w, dm);
    let tiled: Vec<f64> = (0..b).flat_map(|_| pe.data().iter().copied()).collect();
    let pe = tape.constant(Tensor::new(vec![b, w, dm], tiled)?)?;
    let mut h = tape.add(emb, pe)?;
    let mut x_orig = h;
    let mut blocks = Vec::with_capacity(cfg.e_layers);
    for layer in 0..cfg.e_layers {
        let block = maat_block(tape, h, x_orig, cfg, params, layer, ctx)?;
        h = block.x_next;
        x_orig = block.x_next;
        blocks.push(block);
    }
    if cfg.final_norm {
        h = tape.layer_norm(h, params.var("final_ln.g")?, params.var("final_ln.b")?)?;
    }
    let recon = tape.linear(h, params.var("out.w")?, Some(params.var("out.b")?))?;
    Ok(ForwardVars { recon, blocks })
}

const MAGIC: &[u8; 8] = b"MAATCKPT";
const FORMAT_VERSION: u32 = 1;

/// Trained model plus the normalization it was trained under.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelParams,
    pub norm: Option<NormStats>,
}

impl Checkpoint {
    /// Little-endian layout: magic, `u32` version, `u32`-prefixed config
    /// text, `u32` tensor count, then per tensor a `u32`-prefixed name,
    /// `u32` rank, `u64` extents and raw `f64` values.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let text: String = self
            .model
            .config
            .to_pairs()
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        put_str(&mut out, &text);
        let mut tensors: Vec<(String, Tensor)> = self
            .model
            .store
            .iter()
            .map(|(n, t)| (n.to_string(), t.clone()))
            .collect();
        if let Some(norm) = &self.norm {
            let c = norm.mean.len();
            tensors.push((
                "norm.mean".into(),
                Tensor::new(vec![c], norm.mean.clone()).expect("norm"),
            ));
            tensors.push(("norm.std".into(), Tensor::new(vec![c], norm.std.clone()).expect("norm")));
        }
        out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
        for (name, t) in &tensors {
            put_str(&mut out, name);
            out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(MaatError::Checkpoint("not a checkpoint file".into()));
        }
        let version = read_u32(&mut r)?;
        if version != FORMAT_VERSION {
            return Err(MaatError::Checkpoint(format!("unsupported format version {version}")));
        }
        let mut config = ModelConfig::default();
        for line in read_str(&mut r)?.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| MaatError::Checkpoint(format!("bad config line '{line}'")))?;
            if !config.set(k, v)? {
                return Err(MaatError::Checkpoint(format!("unknown config key '{k}'")));
            }
        }
        let count = read_u32(&mut r)?;
        let mut store = ParamStore::new();
        let (mut mean, mut std) = (None, None);
        for _ in 0..count {
            let name = read_str(&mut r)?;
            let ndim = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                let mut b = [0u8; 8];
                read_exact(&mut r, &mut b)?;
                shape.push(u64::from_le_bytes(b) as usize);
            }
            let n: usize = shape.iter().product();
            if n > bytes.len() / 8 {
                return Err(MaatError::Checkpoint(format!("tensor '{name}' larger than the file")));
            }
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                let mut b = [0u8; 8];
                read_exact(&mut r, &mut b)?;
                data.push(f64::from_le_bytes(b));
            }
            match name.as_str() {
                "norm.mean" => mean = Some(data),
                "norm.std" => std = Some(data),
                _ => store.insert(name, Tensor::new(shape, data)?),
            }
        }
        if (r.position() as usize) != bytes.len() {
            return Err(MaatError::Checkpoint("trailing bytes".into()));
        }
        let norm = match (mean, std) {
            (Some(mean), Some(std)) => Some(NormStats { mean, std }),
            (None, None) => None,
            _ => return Err(MaatError::Checkpoint("incomplete normalization record".into())),
        };
        config.validate()?;
        let expected = ModelParams::init(&config)?;
        for (name, t) in expected.store.iter() {
            let got = store
                .get(name)
                .map_err(|_| MaatError::Checkpoint(format!("missing tensor '{name}'")))?;
            if got.shape() != t.shape() {
                return Err(MaatError::Checkpoint(format!(
                    "tensor '{name}' has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        if store.len() != expected.store.len() {
            return Err(MaatError::Checkpoint("unexpected extra tensors".into()));
        }
        // Keep the canonical parameter order.
        let mut ordered = ParamStore::new();
        for (name, _) in expected.store.iter() {
            ordered.insert(name, store.get(name)?.clone());
        }
        Ok(Checkpoint {
            model: ModelParams { config, store: ordered },
            norm,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| MaatError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| MaatError::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn read_exact(r: &mut Cursor<&[u8]>, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| MaatError::Checkpoint("unexpected end of file".into()))
}

fn read_u32(r: &mut Cursor<&[u8]>) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_str(r: &mut Cursor<&[u8]>) -> Result<String> {
    let n = read_u32(r)? as usize;
    if n > r.get_ref().len() {
        return Err(MaatError::Checkpoint("string length exceeds file".into()));
    }
    let mut buf = vec![0u8; n];
    read_exact(r, &mut buf)?;
    String::from_utf8(buf).map_err(|_| MaatError::Checkpoint("invalid utf-8".into()))
}
