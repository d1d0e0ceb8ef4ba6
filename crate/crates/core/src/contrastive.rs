//! Cross-modal contrastive learning: bottleneck adapter and InfoNCE loss.
//!
//! Each modality owns a residual two-layer bottleneck adapter. A batch of
//! adapted appearance/motion pairs is scored with the cross-attention
//! similarity into a `k x k` grid whose diagonal holds the positive pairs;
//! a symmetric temperature-scaled InfoNCE loss pulls the diagonal up. All
//! gradients are analytic and finite-difference verified.

use std::path::Path;

use crate::error::{Error, Result};
use crate::frames::{axpy, dot, Frames};
use crate::sim::{cross_attention_similarity_with_grad, softmax, CostMatrix, MatrixKind};
use crate::store::Modality;
use crate::wire;

const ADAPTER_MAGIC: &[u8; 4] = b"ADPT";

/// Parameter block selector for elementwise access (finite differences,
/// targeted perturbations in tests).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamBlock {
    /// Down-projection matrix, `D x B` row-major.
    WDown,
    /// Down-projection bias, length `B`.
    BDown,
    /// Up-projection matrix, `B x D` row-major.
    WUp,
    /// Up-projection bias, length `D`.
    BUp,
}

/// All four parameter blocks in a fixed iteration order.
pub const PARAM_BLOCKS: [ParamBlock; 4] = [
    ParamBlock::WDown,
    ParamBlock::BDown,
    ParamBlock::WUp,
    ParamBlock::BUp,
];

/// Weights of one residual bottleneck adapter.
///
/// Per frame: `out = x + relu(x W_down + b_down) W_up + b_up`, with
/// `B < D` so the hidden layer is a genuine bottleneck.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    dim: usize,
    bottleneck: usize,
    w_down: Vec<f64>,
    b_down: Vec<f64>,
    w_up: Vec<f64>,
    b_up: Vec<f64>,
}

impl AdapterParams {
    /// Builds parameters from explicit blocks, validating shapes and ranges.
    pub fn new(
        dim: usize,
        bottleneck: usize,
        w_down: Vec<f64>,
        b_down: Vec<f64>,
        w_up: Vec<f64>,
        b_up: Vec<f64>,
    ) -> Result<Self> {
        if bottleneck == 0 || bottleneck >= dim {
            return Err(Error::InvalidParam(format!(
                "bottleneck width {bottleneck} must be in [1, {})",
                dim
            )));
        }
        if w_down.len() != dim * bottleneck
            || b_down.len() != bottleneck
            || w_up.len() != bottleneck * dim
            || b_up.len() != dim
        {
            return Err(Error::Invariant("adapter block shape mismatch".into()));
        }
        let all = w_down
            .iter()
            .chain(&b_down)
            .chain(&w_up)
            .chain(&b_up);
        for &v in all {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    context: "adapter parameter",
                });
            }
        }
        Ok(AdapterParams {
            dim,
            bottleneck,
            w_down,
            b_down,
            w_up,
            b_up,
        })
    }

    /// Untrained initialization: the down-projection gets scaled Gaussian
    /// weights so hidden activations are diverse from the first step, while
    /// the up-projection starts at zero, making the adapter an exact
    /// identity until training moves it.
    pub fn init(dim: usize, bottleneck: usize, seed: u64) -> Result<Self> {
        use rand::{Rng, SeedableRng};
        use rand_distr::StandardNormal;
        let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
        let scale = 1.0 / (dim as f64).sqrt();
        let w_down: Vec<f64> = (0..dim * bottleneck)
            .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        AdapterParams::new(
            dim,
            bottleneck,
            w_down,
            vec![0.0; bottleneck],
            vec![0.0; bottleneck * dim],
            vec![0.0; dim],
        )
    }

    /// Feature dimension `D`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Bottleneck width `B`.
    pub fn bottleneck(&self) -> usize {
        self.bottleneck
    }

    fn block(&self, block: ParamBlock) -> &[f64] {
        match block {
            ParamBlock::WDown => &self.w_down,
            ParamBlock::BDown => &self.b_down,
            ParamBlock::WUp => &self.w_up,
            ParamBlock::BUp => &self.b_up,
        }
    }

    fn block_mut(&mut self, block: ParamBlock) -> &mut [f64] {
        match block {
            ParamBlock::WDown => &mut self.w_down,
            ParamBlock::BDown => &mut self.b_down,
            ParamBlock::WUp => &mut self.w_up,
            ParamBlock::BUp => &mut self.b_up,
        }
    }

    /// Number of parameters in a block.
    pub fn block_len(&self, block: ParamBlock) -> usize {
        self.block(block).len()
    }

    /// Single-parameter read access.
    pub fn get(&self, block: ParamBlock, idx: usize) -> f64 {
        self.block(block)[idx]
    }

    /// Single-parameter write access (finite-difference probes).
    pub fn set(&mut self, block: ParamBlock, idx: usize, value: f64) {
        self.block_mut(block)[idx] = value;
    }

    /// In-place gradient-descent step: `p -= lr * g`.
    pub fn step(&mut self, grad: &AdapterGrad, lr: f64) {
        for (p, g) in self.w_down.iter_mut().zip(&grad.w_down) {
            *p -= lr * g;
        }
        for (p, g) in self.b_down.iter_mut().zip(&grad.b_down) {
            *p -= lr * g;
        }
        for (p, g) in self.w_up.iter_mut().zip(&grad.w_up) {
            *p -= lr * g;
        }
        for (p, g) in self.b_up.iter_mut().zip(&grad.b_up) {
            *p -= lr * g;
        }
    }

    /// True when any parameter is no longer finite (divergence detection).
    pub fn has_non_finite(&self) -> bool {
        PARAM_BLOCKS
            .iter()
            .any(|&b| self.block(b).iter().any(|v| !v.is_finite()))
    }
}

/// Gradient accumulator shaped like [`AdapterParams`].
#[derive(Debug, Clone)]
pub struct AdapterGrad {
    w_down: Vec<f64>,
    b_down: Vec<f64>,
    w_up: Vec<f64>,
    b_up: Vec<f64>,
}

impl AdapterGrad {
    /// Zero gradient for the given adapter shape.
    pub fn zeros(dim: usize, bottleneck: usize) -> Self {
        AdapterGrad {
            w_down: vec![0.0; dim * bottleneck],
            b_down: vec![0.0; bottleneck],
            w_up: vec![0.0; bottleneck * dim],
            b_up: vec![0.0; dim],
        }
    }

    /// Single-entry read access (finite-difference comparisons).
    pub fn get(&self, block: ParamBlock, idx: usize) -> f64 {
        match block {
            ParamBlock::WDown => self.w_down[idx],
            ParamBlock::BDown => self.b_down[idx],
            ParamBlock::WUp => self.w_up[idx],
            ParamBlock::BUp => self.b_up[idx],
        }
    }

    /// Accumulates `other * scale` into `self`.
    pub fn accumulate(&mut self, other: &AdapterGrad, scale: f64) {
        axpy(scale, &other.w_down, &mut self.w_down);
        axpy(scale, &other.b_down, &mut self.b_down);
        axpy(scale, &other.w_up, &mut self.w_up);
        axpy(scale, &other.b_up, &mut self.b_up);
    }

    /// Scales every entry in place.
    pub fn scale(&mut self, factor: f64) {
        for block in [
            &mut self.w_down,
            &mut self.b_down,
            &mut self.w_up,
            &mut self.b_up,
        ] {
            for v in block.iter_mut() {
                *v *= factor;
            }
        }
    }
}

/// Applies the residual bottleneck per frame:
/// `out_t = x_t + relu(x_t W_down + b_down) W_up + b_up`.
pub fn adapter_forward(x: &Frames, p: &AdapterParams) -> Result<Frames> {
    if x.dim() != p.dim {
        return Err(Error::DimMismatch {
            left: x.dim(),
            right: p.dim,
        });
    }
    let (d, b) = (p.dim, p.bottleneck);
    let mut out = Frames::zeros(x.num_frames(), d);
    let mut hidden = vec![0.0; b];
    for t in 0..x.num_frames() {
        let xt = x.frame(t);
        for j in 0..b {
            let mut z = p.b_down[j];
            for i in 0..d {
                z += xt[i] * p.w_down[i * b + j];
            }
            hidden[j] = z.max(0.0);
        }
        let row = out.frame_mut(t);
        row.copy_from_slice(xt);
        for (i, r) in row.iter_mut().enumerate() {
            *r += p.b_up[i];
        }
        for j in 0..b {
            if hidden[j] != 0.0 {
                axpy(hidden[j], &p.w_up[j * d..(j + 1) * d], row);
            }
        }
    }
    Ok(out)
}

/// Exact analytic gradients of [`adapter_forward`].
///
/// `upstream` holds `dL/d out` per frame; returns `dL/d x` and `dL/d p`.
/// The relu subgradient at exactly zero is taken as zero.
pub fn adapter_backward(
    x: &Frames,
    p: &AdapterParams,
    upstream: &Frames,
) -> Result<(Frames, AdapterGrad)> {
    if x.dim() != p.dim {
        return Err(Error::DimMismatch {
            left: x.dim(),
            right: p.dim,
        });
    }
    if upstream.num_frames() != x.num_frames() || upstream.dim() != x.dim() {
        return Err(Error::Invariant(
            "upstream gradient shape must match the input".into(),
        ));
    }
    let (d, b) = (p.dim, p.bottleneck);
    let mut grad_x = Frames::zeros(x.num_frames(), d);
    let mut grad = AdapterGrad::zeros(d, b);
    let mut pre = vec![0.0; b]; // pre-activation z
    let mut dz = vec![0.0; b];
    for t in 0..x.num_frames() {
        let xt = x.frame(t);
        let g = upstream.frame(t);
        for j in 0..b {
            let mut z = p.b_down[j];
            for i in 0..d {
                z += xt[i] * p.w_down[i * b + j];
            }
            pre[j] = z;
        }
        // Up-projection blocks.
        axpy(1.0, g, &mut grad.b_up);
        for j in 0..b {
            let h = pre[j].max(0.0);
            if h != 0.0 {
                axpy(h, g, &mut grad.w_up[j * d..(j + 1) * d]);
            }
            let dh = dot(&p.w_up[j * d..(j + 1) * d], g);
            dz[j] = if pre[j] > 0.0 { dh } else { 0.0 };
        }
        // Down-projection blocks.
        axpy(1.0, &dz, &mut grad.b_down);
        for i in 0..d {
            for j in 0..b {
                grad.w_down[i * b + j] += xt[i] * dz[j];
            }
        }
        // Input: identity path plus bottleneck path.
        let gx = grad_x.frame_mut(t);
        gx.copy_from_slice(g);
        for i in 0..d {
            let mut acc = 0.0;
            for j in 0..b {
                acc += p.w_down[i * b + j] * dz[j];
            }
            gx[i] += acc;
        }
    }
    Ok((grad_x, grad))
}

/// One adapter per modality.
#[derive(Debug, Clone, PartialEq)]
pub struct Adapters {
    /// Appearance-stream adapter.
    pub rgb: AdapterParams,
    /// Motion-stream adapter.
    pub flow: AdapterParams,
}

impl Adapters {
    /// Pairs two adapters, requiring a shared feature dimension.
    pub fn new(rgb: AdapterParams, flow: AdapterParams) -> Result<Self> {
        if rgb.dim != flow.dim {
            return Err(Error::DimMismatch {
                left: rgb.dim,
                right: flow.dim,
            });
        }
        Ok(Adapters { rgb, flow })
    }

    /// Identity-initialized pair with independent down-projection draws.
    pub fn init(dim: usize, bottleneck: usize, seed: u64) -> Result<Self> {
        Adapters::new(
            AdapterParams::init(dim, bottleneck, crate::derive_seed(seed, 0))?,
            AdapterParams::init(dim, bottleneck, crate::derive_seed(seed, 1))?,
        )
    }

    /// Adapter for one modality.
    pub fn params(&self, modality: Modality) -> &AdapterParams {
        match modality {
            Modality::Rgb => &self.rgb,
            Modality::Flow => &self.flow,
        }
    }

    /// Mutable adapter for one modality.
    pub fn params_mut(&mut self, modality: Modality) -> &mut AdapterParams {
        match modality {
            Modality::Rgb => &mut self.rgb,
            Modality::Flow => &mut self.flow,
        }
    }
}

/// A batch of adapted appearance/motion pairs plus the softmax temperature.
#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    pairs: Vec<(Frames, Frames)>,
    temperature: f64,
}

impl ContrastiveBatch {
    /// Validates and wraps `(rgb, flow)` pairs from distinct videos.
    pub fn new(pairs: Vec<(Frames, Frames)>, temperature: f64) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::InsufficientData("empty contrastive batch".into()));
        }
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::InvalidParam(format!(
                "temperature must be positive and finite, got {temperature}"
            )));
        }
        let dim = pairs[0].0.dim();
        for (rgb, flow) in &pairs {
            if rgb.dim() != dim || flow.dim() != dim {
                return Err(Error::DimMismatch {
                    left: dim,
                    right: if rgb.dim() != dim { rgb.dim() } else { flow.dim() },
                });
            }
            if rgb.num_frames() == 0 || flow.num_frames() == 0 {
                return Err(Error::EmptyMatrix);
            }
        }
        Ok(ContrastiveBatch { pairs, temperature })
    }

    /// Number of pairs `k`.
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    /// True when the batch holds no pairs (never after construction).
    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Softmax temperature.
    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    /// Pair accessor: `(rgb, flow)` for index `i`.
    pub fn pair(&self, i: usize) -> (&Frames, &Frames) {
        (&self.pairs[i].0, &self.pairs[i].1)
    }
}

/// `k x k` grid of cross-attention similarities; entry `(i, j)` compares
/// the appearance stream of pair `i` with the motion stream of pair `j`,
/// so the diagonal holds the positive pairs.
pub fn mcl_similarity_matrix(batch: &ContrastiveBatch) -> Result<CostMatrix> {
    let k = batch.len();
    let mut values = Vec::with_capacity(k * k);
    for i in 0..k {
        for j in 0..k {
            let g = cross_attention_similarity_with_grad(batch.pair(i).0, batch.pair(j).1)?;
            values.push(g.value);
        }
    }
    CostMatrix::similarity(k, k, values)
}

fn check_infonce_input(sim: &CostMatrix, temperature: f64) -> Result<usize> {
    if sim.kind() != MatrixKind::Similarity {
        return Err(Error::InvalidParam(
            "contrastive loss requires a similarity-kind matrix".into(),
        ));
    }
    if sim.rows() != sim.cols() {
        return Err(Error::NotSquare {
            rows: sim.rows(),
            cols: sim.cols(),
        });
    }
    if sim.rows() == 0 {
        return Err(Error::EmptyMatrix);
    }
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::InvalidParam(format!(
            "temperature must be positive and finite, got {temperature}"
        )));
    }
    Ok(sim.rows())
}

/// Symmetric temperature-scaled InfoNCE over a square similarity grid with
/// positives on the diagonal:
/// `L = (1/2k) * sum_i [ -log softmax_row_i(sim/t)[i] - log softmax_col_i(sim/t)[i] ]`.
pub fn infonce_loss(sim: &CostMatrix, temperature: f64) -> Result<f64> {
    let k = check_infonce_input(sim, temperature)?;
    let mut total = 0.0;
    for i in 0..k {
        let row: Vec<f64> = (0..k).map(|j| sim.at(i, j) / temperature).collect();
        let col: Vec<f64> = (0..k).map(|j| sim.at(j, i) / temperature).collect();
        total -= softmax(&row)[i].ln();
        total -= softmax(&col)[i].ln();
    }
    Ok(total / (2.0 * k as f64))
}

/// Gradient of [`infonce_loss`] with respect to every similarity entry,
/// returned as a row-major `k x k` buffer.
pub fn infonce_grad(sim: &CostMatrix, temperature: f64) -> Result<Vec<f64>> {
    let k = check_infonce_input(sim, temperature)?;
    let scale = 1.0 / (2.0 * k as f64 * temperature);
    let mut grad = vec![0.0; k * k];
    for i in 0..k {
        let row: Vec<f64> = (0..k).map(|j| sim.at(i, j) / temperature).collect();
        let p = softmax(&row);
        for j in 0..k {
            grad[i * k + j] += scale * (p[j] - if i == j { 1.0 } else { 0.0 });
        }
    }
    for j in 0..k {
        let col: Vec<f64> = (0..k).map(|i| sim.at(i, j) / temperature).collect();
        let p = softmax(&col);
        for i in 0..k {
            grad[i * k + j] += scale * (p[i] - if i == j { 1.0 } else { 0.0 });
        }
    }
    Ok(grad)
}

/// Contrastive loss of a batch together with its gradients with respect to
/// every adapted frame sequence in the batch.
///
/// Chains [`mcl_similarity_matrix`] gradients through [`infonce_grad`]:
/// the `i`-th entries of the returned vectors are `dL/d rgb_i` and
/// `dL/d flow_i`.
pub fn mcl_loss_and_grads(batch: &ContrastiveBatch) -> Result<(f64, Vec<Frames>, Vec<Frames>)> {
    let k = batch.len();
    let tau = batch.temperature();
    // Forward pass keeping every pairwise similarity gradient.
    let mut values = Vec::with_capacity(k * k);
    let mut pair_grads = Vec::with_capacity(k * k);
    for i in 0..k {
        for j in 0..k {
            let g = cross_attention_similarity_with_grad(batch.pair(i).0, batch.pair(j).1)?;
            values.push(g.value);
            pair_grads.push((g.grad_x, g.grad_y));
        }
    }
    let sim = CostMatrix::similarity(k, k, values)?;
    let loss = infonce_loss(&sim, tau)?;
    let gsim = infonce_grad(&sim, tau)?;

    let mut grad_rgb: Vec<Frames> = (0..k)
        .map(|i| Frames::zeros(batch.pair(i).0.num_frames(), batch.pair(i).0.dim()))
        .collect();
    let mut grad_flow: Vec<Frames> = (0..k)
        .map(|j| Frames::zeros(batch.pair(j).1.num_frames(), batch.pair(j).1.dim()))
        .collect();
    for i in 0..k {
        for j in 0..k {
            let w = gsim[i * k + j];
            if w == 0.0 {
                continue;
            }
            let (gx, gy) = &pair_grads[i * k + j];
            axpy(w, gx.as_slice(), grad_rgb[i].as_mut_slice());
            axpy(w, gy.as_slice(), grad_flow[j].as_mut_slice());
        }
    }
    Ok((loss, grad_rgb, grad_flow))
}

fn encode_adapter_section(p: &AdapterParams, out: &mut Vec<u8>) {
    let mut section = Vec::new();
    section.extend_from_slice(ADAPTER_MAGIC);
    wire::put_u32(&mut section, p.bottleneck as u32);
    wire::put_u32(&mut section, p.dim as u32);
    for block in PARAM_BLOCKS {
        for &v in p.block(block) {
            wire::put_f32(&mut section, v as f32);
        }
    }
    wire::seal_crc(&mut section);
    out.extend_from_slice(&section);
}

fn decode_adapter_section(cursor: &mut wire::Cursor) -> Result<AdapterParams> {
    let magic = cursor.get_bytes(4)?;
    if magic != ADAPTER_MAGIC {
        return Err(Error::BadMagic { expected: "ADPT" });
    }
    let bottleneck = cursor.get_u32()? as usize;
    let dim = cursor.get_u32()? as usize;
    if bottleneck == 0 || dim == 0 || bottleneck >= dim {
        return Err(Error::Invariant(format!(
            "checkpoint declares bottleneck {bottleneck} for dimension {dim}"
        )));
    }
    let mut read_block = |len: usize| -> Result<Vec<f64>> {
        let mut block = Vec::with_capacity(len);
        for _ in 0..len {
            block.push(cursor.get_f32()? as f64);
        }
        Ok(block)
    };
    let w_down = read_block(dim * bottleneck)?;
    let b_down = read_block(bottleneck)?;
    let w_up = read_block(bottleneck * dim)?;
    let b_up = read_block(dim)?;
    AdapterParams::new(dim, bottleneck, w_down, b_down, w_up, b_up)
}

/// Serializes both adapters (appearance section first, then motion), each
/// section independently checksummed.
pub fn encode_adapters(adapters: &Adapters) -> Vec<u8> {
    let mut out = Vec::new();
    encode_adapter_section(&adapters.rgb, &mut out);
    encode_adapter_section(&adapters.flow, &mut out);
    out
}

/// Parses a two-section adapter checkpoint produced by [`encode_adapters`].
pub fn decode_adapters(bytes: &[u8]) -> Result<Adapters> {
    let section_len = |b: &[u8]| -> Result<usize> {
        // Peek the header to know how long this section is, then CRC-check
        // exactly that many bytes.
        let mut c = wire::Cursor::new(b);
        let magic = c.get_bytes(4)?;
        if magic != ADAPTER_MAGIC {
            return Err(Error::BadMagic { expected: "ADPT" });
        }
        let bn = c.get_u32()? as usize;
        let d = c.get_u32()? as usize;
        if bn == 0 || d == 0 {
            return Err(Error::Invariant(format!(
                "checkpoint declares bottleneck {bn} for dimension {d}"
            )));
        }
        let floats = 2 * d * bn + bn + d;
        Ok(4 + 4 + 4 + 4 * floats + 4)
    };

    let len_rgb = section_len(bytes)?;
    if bytes.len() < len_rgb {
        return Err(Error::Truncated {
            needed: len_rgb - bytes.len(),
        });
    }
    let rgb_bytes = wire::check_crc(&bytes[..len_rgb])?;
    let mut cursor = wire::Cursor::new(rgb_bytes);
    let rgb = decode_adapter_section(&mut cursor)?;

    let rest = &bytes[len_rgb..];
    let len_flow = section_len(rest)?;
    if rest.len() < len_flow {
        return Err(Error::Truncated {
            needed: len_flow - rest.len(),
        });
    }
    if rest.len() > len_flow {
        return Err(Error::Invariant(
            "trailing bytes after adapter checkpoint".into(),
        ));
    }
    let flow_bytes = wire::check_crc(&rest[..len_flow])?;
    let mut cursor = wire::Cursor::new(flow_bytes);
    let flow = decode_adapter_section(&mut cursor)?;

    Adapters::new(rgb, flow)
}

/// Writes an adapter checkpoint to disk.
pub fn save_adapters(adapters: &Adapters, path: &Path) -> Result<()> {
    std::fs::write(path, encode_adapters(adapters))?;
    Ok(())
}

/// Reads an adapter checkpoint from disk.
pub fn load_adapters(path: &Path) -> Result<Adapters> {
    decode_adapters(&std::fs::read(path)?)
}
