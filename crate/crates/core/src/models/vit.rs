use serde::{Deserialize, Serialize};

use super::layers::{cross_entropy, gelu, gelu_deriv, linear_forward, NormCache};
use super::{check_batch, LayerNorm, MaskedLinear, Network, Param, Pass};
use crate::error::{Error, Result};
use crate::numeric::{softmax_in_place, Matrix, RngState};
use crate::token_merge::{single_pass_merge_traced, MergeTrace, TokenBatch};

/// Vision transformer geometry.
///
/// `merge_ratio` is the fraction of unprotected tokens folded away by one
/// merge right after the position embedding. Attention adds `ln(size)` of
/// each key token to its logits, so a merged token counts as the tokens it
/// replaced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VitConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub layers: usize,
    /// FFN hidden width as a multiple of `embed_dim`.
    pub mlp_ratio: usize,
    pub classes: usize,
    pub class_token: bool,
    pub merge_ratio: f64,
}

impl Default for VitConfig {
    /// Native 32×32 CIFAR geometry, patch 4, four blocks.
    fn default() -> Self {
        Self {
            image_size: 32,
            channels: 3,
            patch_size: 4,
            embed_dim: 384,
            heads: 3,
            layers: 4,
            mlp_ratio: 4,
            classes: 10,
            class_token: true,
            merge_ratio: 0.0,
        }
    }
}

impl VitConfig {
    /// 224×224 inputs with 16-pixel patches.
    pub fn full_geometry() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            ..Self::default()
        }
    }

    /// Narrow model for desk-scale runs.
    pub fn smoke() -> Self {
        Self {
            embed_dim: 48,
            ..Self::default()
        }
    }

    /// Two blocks on a 4×4 image, used by gradient checks.
    pub fn tiny() -> Self {
        Self {
            image_size: 4,
            channels: 3,
            patch_size: 2,
            embed_dim: 8,
            heads: 2,
            layers: 2,
            mlp_ratio: 2,
            classes: 3,
            class_token: true,
            merge_ratio: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.image_size,
            self.channels,
            self.patch_size,
            self.embed_dim,
            self.heads,
            self.layers,
            self.mlp_ratio,
            self.classes,
        ];
        if positive.iter().any(|&v| v == 0) {
            return Err(Error::InvalidArgument("ViT dimensions must be positive".into()));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "embed dim {} not divisible by {} heads",
                self.embed_dim, self.heads
            )));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::InvalidArgument(format!(
                "image size {} not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if !(0.0..1.0).contains(&self.merge_ratio) {
            return Err(Error::InvalidArgument(format!(
                "merge ratio must be in [0, 1), got {}",
                self.merge_ratio
            )));
        }
        Ok(())
    }

    pub fn patch_count(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Tokens entering the merge, class token included.
    pub fn token_count(&self) -> usize {
        self.patch_count() + usize::from(self.class_token)
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }

    pub fn input_dim(&self) -> usize {
        self.channels * self.image_size * self.image_size
    }

    pub fn hidden_dim(&self) -> usize {
        self.embed_dim * self.mlp_ratio
    }

    fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }
}

/// Splits one channel-major image into row-major patches.
///
/// Each patch row lists channel, then patch row, then patch column.
pub fn patchify(image: &[f64], config: &VitConfig) -> Result<Matrix> {
    if image.len() != config.input_dim() {
        return Err(Error::Shape(format!(
            "image has {} values, expected {}",
            image.len(),
            config.input_dim()
        )));
    }
    let (s, p) = (config.image_size, config.patch_size);
    let side = s / p;
    let mut out = Matrix::zeros(config.patch_count(), config.patch_dim());
    for py in 0..side {
        for px in 0..side {
            let row = out.row_mut(py * side + px);
            let mut k = 0;
            for c in 0..config.channels {
                for dy in 0..p {
                    let start = c * s * s + (py * p + dy) * s + px * p;
                    row[k..k + p].copy_from_slice(&image[start..start + p]);
                    k += p;
                }
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq)]
struct Block {
    norm1: LayerNorm,
    qkv: MaskedLinear,
    proj: MaskedLinear,
    norm2: LayerNorm,
    fc1: MaskedLinear,
    fc2: MaskedLinear,
}

impl Block {
    fn new(l: usize, config: &VitConfig, rng: &mut RngState) -> Self {
        let (d, h) = (config.embed_dim, config.hidden_dim());
        let name = |s: &str| format!("blocks.{l}.{s}");
        Self {
            norm1: LayerNorm::new(&name("norm1"), d),
            qkv: MaskedLinear::new(&name("attn.qkv"), d, 3 * d, 1.0, true, rng),
            proj: MaskedLinear::new(&name("attn.proj"), d, d, 1.0, true, rng),
            norm2: LayerNorm::new(&name("norm2"), d),
            fc1: MaskedLinear::new(&name("mlp.fc1"), d, h, 2.0, true, rng),
            fc2: MaskedLinear::new(&name("mlp.fc2"), h, d, 1.0, true, rng),
        }
    }

    fn params(&self) -> [&Param; 12] {
        [
            &self.norm1.gamma,
            &self.norm1.beta,
            &self.qkv.weight,
            self.qkv.bias.as_ref().unwrap(),
            &self.proj.weight,
            self.proj.bias.as_ref().unwrap(),
            &self.norm2.gamma,
            &self.norm2.beta,
            &self.fc1.weight,
            self.fc1.bias.as_ref().unwrap(),
            &self.fc2.weight,
            self.fc2.bias.as_ref().unwrap(),
        ]
    }

    fn params_mut(&mut self) -> [&mut Param; 12] {
        [
            &mut self.norm1.gamma,
            &mut self.norm1.beta,
            &mut self.qkv.weight,
            self.qkv.bias.as_mut().unwrap(),
            &mut self.proj.weight,
            self.proj.bias.as_mut().unwrap(),
            &mut self.norm2.gamma,
            &mut self.norm2.beta,
            &mut self.fc1.weight,
            self.fc1.bias.as_mut().unwrap(),
            &mut self.fc2.weight,
            self.fc2.bias.as_mut().unwrap(),
        ]
    }
}

/// Gated weights of one block, computed once per batch.
struct BlockWeights {
    qkv: Matrix,
    proj: Matrix,
    fc1: Matrix,
    fc2: Matrix,
}

struct BlockCache {
    ln1: NormCache,
    a: Matrix,
    qkv: Matrix,
    probs: Vec<Matrix>,
    concat: Matrix,
    ln2: NormCache,
    c: Matrix,
    f: Matrix,
    g: Matrix,
}

struct SampleCache {
    patches: Matrix,
    trace: MergeTrace,
    sizes: Vec<usize>,
    blocks: Vec<BlockCache>,
    final_ln: NormCache,
    readout: Matrix,
}

/// Intermediate values of one forward pass, for inspection.
#[derive(Clone, Debug)]
pub struct VitTrace {
    /// Token sizes after the merge.
    pub sizes: Vec<usize>,
    /// Attention probabilities, indexed by layer then head.
    pub attention: Vec<Vec<Matrix>>,
    pub logits: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vit {
    config: VitConfig,
    patch_w: Param,
    patch_b: Param,
    cls: Option<Param>,
    pos: Param,
    blocks: Vec<Block>,
    norm: LayerNorm,
    head_w: Param,
    head_b: Param,
}

impl Vit {
    pub fn new(config: VitConfig, rng: &mut RngState) -> Result<Self> {
        config.validate()?;
        let d = config.embed_dim;
        let pd = config.patch_dim();
        let patch_w = Param::gaussian("patch_embed.weight", pd, d, (1.0 / pd as f64).sqrt(), false, rng);
        let cls = config
            .class_token
            .then(|| Param::gaussian("cls_token", 1, d, 0.02, false, rng));
        let pos = Param::gaussian("pos_embed", config.token_count(), d, 0.02, false, rng);
        let blocks = (0..config.layers).map(|l| Block::new(l, &config, rng)).collect();
        let head_w = Param::gaussian("head.weight", d, config.classes, (1.0 / d as f64).sqrt(), false, rng);
        Ok(Self {
            patch_b: Param::dense("patch_embed.bias", Matrix::zeros(1, d)),
            head_b: Param::dense("head.bias", Matrix::zeros(1, config.classes)),
            norm: LayerNorm::new("norm", d),
            config,
            patch_w,
            cls,
            pos,
            blocks,
            head_w,
        })
    }

    pub fn config(&self) -> &VitConfig {
        &self.config
    }

    /// Overrides the merge ratio used by the [`Network`] methods.
    pub fn set_merge_ratio(&mut self, ratio: f64) -> Result<()> {
        if !(0.0..1.0).contains(&ratio) {
            return Err(Error::InvalidArgument(format!("merge ratio must be in [0, 1), got {ratio}")));
        }
        self.config.merge_ratio = ratio;
        Ok(())
    }

    fn block_weights(&self) -> Vec<BlockWeights> {
        self.blocks
            .iter()
            .map(|b| BlockWeights {
                qkv: b.qkv.weight.effective(),
                proj: b.proj.weight.effective(),
                fc1: b.fc1.weight.effective(),
                fc2: b.fc2.weight.effective(),
            })
            .collect()
    }

    /// `merge` of `None` skips the merge step entirely.
    fn forward_sample(
        &self,
        weights: &[BlockWeights],
        image: &[f64],
        merge: Option<f64>,
    ) -> Result<(Vec<f64>, SampleCache)> {
        let cfg = &self.config;
        let d = cfg.embed_dim;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let patches = patchify(image, cfg)?;
        let emb = linear_forward(&patches, &self.patch_w.value, Some(&self.patch_b.value))?;
        let mut tokens = match &self.cls {
            Some(cls) => {
                let mut t = Matrix::zeros(cfg.token_count(), d);
                t.row_mut(0).copy_from_slice(cls.value.row(0));
                for r in 0..emb.rows() {
                    t.row_mut(r + 1).copy_from_slice(emb.row(r));
                }
                t
            }
            None => emb,
        };
        tokens.add_assign(&self.pos.value)?;
        let batch = if cfg.class_token {
            TokenBatch::with_class_token(tokens)
        } else {
            TokenBatch::new(tokens)
        };
        let (merged, trace) = match merge {
            Some(ratio) => single_pass_merge_traced(&batch, ratio)?,
            None => {
                let n = batch.len();
                (batch, MergeTrace::identity(n))
            }
        };
        let sizes = merged.sizes;
        let log_sizes: Vec<f64> = sizes.iter().map(|&s| (s as f64).ln()).collect();
        let n = sizes.len();
        let mut x = merged.tokens;

        let mut block_caches = Vec::with_capacity(self.blocks.len());
        for (block, w) in self.blocks.iter().zip(weights) {
            let (a, ln1) = block.norm1.forward_cached(&x);
            let qkv = linear_forward(&a, &w.qkv, block.qkv.bias.as_ref().map(|b| &b.value))?;
            let mut concat = Matrix::zeros(n, d);
            let mut probs = Vec::with_capacity(cfg.heads);
            for h in 0..cfg.heads {
                let q = qkv.column_block(h * dh, dh);
                let k = qkv.column_block(d + h * dh, dh);
                let v = qkv.column_block(2 * d + h * dh, dh);
                let mut p = q.matmul_nt(&k)?;
                for r in 0..n {
                    let row = p.row_mut(r);
                    for (s, ls) in row.iter_mut().zip(&log_sizes) {
                        *s = *s * scale + ls;
                    }
                    softmax_in_place(row);
                }
                concat.set_column_block(h * dh, &p.matmul(&v)?);
                probs.push(p);
            }
            let y = linear_forward(&concat, &w.proj, block.proj.bias.as_ref().map(|b| &b.value))?;
            x.add_assign(&y)?;
            let (c, ln2) = block.norm2.forward_cached(&x);
            let f = linear_forward(&c, &w.fc1, block.fc1.bias.as_ref().map(|b| &b.value))?;
            let g = f.map(gelu);
            let z = linear_forward(&g, &w.fc2, block.fc2.bias.as_ref().map(|b| &b.value))?;
            x.add_assign(&z)?;
            block_caches.push(BlockCache {
                ln1,
                a,
                qkv,
                probs,
                concat,
                ln2,
                c,
                f,
                g,
            });
        }

        let (normed, final_ln) = self.norm.forward_cached(&x);
        let readout = if cfg.class_token {
            Matrix::row_vector(normed.row(0).to_vec())
        } else {
            let total = sizes.iter().sum::<usize>() as f64;
            let mut r = vec![0.0; d];
            for (i, &s) in sizes.iter().enumerate() {
                for (acc, v) in r.iter_mut().zip(normed.row(i)) {
                    *acc += s as f64 / total * v;
                }
            }
            Matrix::row_vector(r)
        };
        let logits = linear_forward(&readout, &self.head_w.value, Some(&self.head_b.value))?.into_vec();
        Ok((
            logits,
            SampleCache {
                patches,
                trace,
                sizes,
                blocks: block_caches,
                final_ln,
                readout,
            },
        ))
    }

    /// Accumulates one sample's gradients into `grads` (parameter order).
    fn backward_sample(
        &self,
        weights: &[BlockWeights],
        cache: &SampleCache,
        dlogits: &Matrix,
        grads: &mut [Matrix],
    ) -> Result<()> {
        let cfg = &self.config;
        let d = cfg.embed_dim;
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let n = cache.sizes.len();
        let lay = Layout::new(cfg);

        grads[lay.head_w].add_assign(&cache.readout.matmul_tn(dlogits)?)?;
        grads[lay.head_b].add_assign(dlogits)?;
        let dr = dlogits.matmul_nt(&self.head_w.value)?;
        let mut dnormed = Matrix::zeros(n, d);
        if cfg.class_token {
            dnormed.row_mut(0).copy_from_slice(dr.row(0));
        } else {
            let total = cache.sizes.iter().sum::<usize>() as f64;
            for (i, &s) in cache.sizes.iter().enumerate() {
                for (dst, v) in dnormed.row_mut(i).iter_mut().zip(dr.row(0)) {
                    *dst = s as f64 / total * v;
                }
            }
        }
        let (dg, db, mut dx) = self.norm.backward(&cache.final_ln, &dnormed);
        grads[lay.norm_gamma].add_assign(&dg)?;
        grads[lay.norm_beta].add_assign(&db)?;

        for (l, ((block, w), bc)) in self.blocks.iter().zip(weights).zip(&cache.blocks).enumerate().rev() {
            let gi = lay.block(l);

            // FFN branch.
            grads[gi + 10].add_assign(&bc.g.matmul_tn(&dx)?)?;
            grads[gi + 11].add_assign(&dx.sum_rows())?;
            let dgelu = dx.matmul_nt(&w.fc2)?;
            let df = dgelu.zip_with(&bc.f, |g, f| g * gelu_deriv(f))?;
            grads[gi + 8].add_assign(&bc.c.matmul_tn(&df)?)?;
            grads[gi + 9].add_assign(&df.sum_rows())?;
            let dc = df.matmul_nt(&w.fc1)?;
            let (dg2, db2, dres) = block.norm2.backward(&bc.ln2, &dc);
            grads[gi + 6].add_assign(&dg2)?;
            grads[gi + 7].add_assign(&db2)?;
            dx.add_assign(&dres)?;

            // Attention branch.
            grads[gi + 4].add_assign(&bc.concat.matmul_tn(&dx)?)?;
            grads[gi + 5].add_assign(&dx.sum_rows())?;
            let dconcat = dx.matmul_nt(&w.proj)?;
            let mut dqkv = Matrix::zeros(n, 3 * d);
            for (h, p) in bc.probs.iter().enumerate() {
                let q = bc.qkv.column_block(h * dh, dh);
                let k = bc.qkv.column_block(d + h * dh, dh);
                let v = bc.qkv.column_block(2 * d + h * dh, dh);
                let dout = dconcat.column_block(h * dh, dh);
                let dp = dout.matmul_nt(&v)?;
                let dv = p.matmul_tn(&dout)?;
                let mut ds = Matrix::zeros(n, n);
                for r in 0..n {
                    let (pr, dpr) = (p.row(r), dp.row(r));
                    let inner: f64 = pr.iter().zip(dpr).map(|(a, b)| a * b).sum();
                    for (o, (a, b)) in ds.row_mut(r).iter_mut().zip(pr.iter().zip(dpr)) {
                        *o = a * (b - inner) * scale;
                    }
                }
                dqkv.set_column_block(h * dh, &ds.matmul(&k)?);
                dqkv.set_column_block(d + h * dh, &ds.matmul_tn(&q)?);
                dqkv.set_column_block(2 * d + h * dh, &dv);
            }
            grads[gi + 2].add_assign(&bc.a.matmul_tn(&dqkv)?)?;
            grads[gi + 3].add_assign(&dqkv.sum_rows())?;
            let da = dqkv.matmul_nt(&w.qkv)?;
            let (dg1, db1, dres) = block.norm1.backward(&bc.ln1, &da);
            grads[gi].add_assign(&dg1)?;
            grads[gi + 1].add_assign(&db1)?;
            dx.add_assign(&dres)?;
        }

        let dtokens = cache.trace.backward(&dx);
        grads[lay.pos].add_assign(&dtokens)?;
        let offset = usize::from(cfg.class_token);
        if let Some(ci) = lay.cls {
            grads[ci].add_assign(&Matrix::row_vector(dtokens.row(0).to_vec()))?;
        }
        let demb = dtokens.select_rows(&(offset..dtokens.rows()).collect::<Vec<_>>());
        grads[lay.patch_w].add_assign(&cache.patches.matmul_tn(&demb)?)?;
        grads[lay.patch_b].add_assign(&demb.sum_rows())?;
        Ok(())
    }

    /// Forward and backward with an explicit merge setting; `None` bypasses
    /// the merge code path.
    pub fn forward_backward_with(&self, inputs: &Matrix, labels: &[usize], merge: Option<f64>) -> Result<Pass> {
        check_batch(inputs, labels, self.config.input_dim(), self.config.classes)?;
        let weights = self.block_weights();
        let mut grads: Vec<Matrix> = self
            .params()
            .iter()
            .map(|p| Matrix::zeros(p.value.rows(), p.value.cols()))
            .collect();
        let mut logits = Matrix::zeros(inputs.rows(), self.config.classes);
        let mut caches = Vec::with_capacity(inputs.rows());
        for r in 0..inputs.rows() {
            let (l, cache) = self.forward_sample(&weights, inputs.row(r), merge)?;
            logits.row_mut(r).copy_from_slice(&l);
            caches.push(cache);
        }
        let (loss, dlogits) = cross_entropy(&logits, labels)?;
        for (r, cache) in caches.iter().enumerate() {
            let dl = Matrix::row_vector(dlogits.row(r).to_vec());
            self.backward_sample(&weights, cache, &dl, &mut grads)?;
        }
        for (p, g) in self.params().iter().zip(grads.iter_mut()) {
            p.gate_grad(g);
        }
        Ok(Pass { loss, logits, grads })
    }

    pub fn logits_with(&self, inputs: &Matrix, merge: Option<f64>) -> Result<Matrix> {
        if inputs.cols() != self.config.input_dim() {
            return Err(Error::Shape(format!(
                "expected {} input features, got {}",
                self.config.input_dim(),
                inputs.cols()
            )));
        }
        let weights = self.block_weights();
        let mut logits = Matrix::zeros(inputs.rows(), self.config.classes);
        for r in 0..inputs.rows() {
            let (l, _) = self.forward_sample(&weights, inputs.row(r), merge)?;
            logits.row_mut(r).copy_from_slice(&l);
        }
        Ok(logits)
    }

    /// Attention maps and token sizes for one image.
    pub fn trace(&self, image: &[f64]) -> Result<VitTrace> {
        let weights = self.block_weights();
        let (logits, cache) = self.forward_sample(&weights, image, self.merge_setting())?;
        Ok(VitTrace {
            sizes: cache.sizes,
            attention: cache.blocks.into_iter().map(|b| b.probs).collect(),
            logits,
        })
    }

    fn merge_setting(&self) -> Option<f64> {
        (self.config.merge_ratio > 0.0).then_some(self.config.merge_ratio)
    }
}

/// Positions of the non-block parameters in [`Network::params`] order.
struct Layout {
    patch_w: usize,
    patch_b: usize,
    cls: Option<usize>,
    pos: usize,
    blocks_start: usize,
    norm_gamma: usize,
    norm_beta: usize,
    head_w: usize,
    head_b: usize,
}

impl Layout {
    fn new(cfg: &VitConfig) -> Self {
        let cls = cfg.class_token.then_some(2);
        let pos = 2 + usize::from(cfg.class_token);
        let blocks_start = pos + 1;
        let end = blocks_start + 12 * cfg.layers;
        Self {
            patch_w: 0,
            patch_b: 1,
            cls,
            pos,
            blocks_start,
            norm_gamma: end,
            norm_beta: end + 1,
            head_w: end + 2,
            head_b: end + 3,
        }
    }

    fn block(&self, l: usize) -> usize {
        self.blocks_start + 12 * l
    }
}

impl Network for Vit {
    fn params(&self) -> Vec<&Param> {
        let mut out = vec![&self.patch_w, &self.patch_b];
        out.extend(self.cls.as_ref());
        out.push(&self.pos);
        for b in &self.blocks {
            out.extend(b.params());
        }
        out.extend([&self.norm.gamma, &self.norm.beta, &self.head_w, &self.head_b]);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = vec![&mut self.patch_w, &mut self.patch_b];
        out.extend(self.cls.as_mut());
        out.push(&mut self.pos);
        for b in &mut self.blocks {
            out.extend(b.params_mut());
        }
        out.extend([
            &mut self.norm.gamma,
            &mut self.norm.beta,
            &mut self.head_w,
            &mut self.head_b,
        ]);
        out
    }

    fn forward_backward(&self, inputs: &Matrix, labels: &[usize]) -> Result<Pass> {
        self.forward_backward_with(inputs, labels, self.merge_setting())
    }

    fn logits(&self, inputs: &Matrix) -> Result<Matrix> {
        self.logits_with(inputs, self.merge_setting())
    }
}
