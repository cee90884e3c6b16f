//! Four-block convolutional embedding network with gate insertion sites.
//!
//! Each block is conv3x3 -> batch-norm -> relu -> [gate] -> pool. Blocks 1-3
//! max-pool by 2; block 4 ends in global average pooling, so the embedding
//! length equals the last block's channel count.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{BatchStats, Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_CHANNELS: [usize; 4] = [16, 32, 64, 128];
pub const DEFAULT_DECOMPOSE_DEPTH: usize = 2;
pub const INPUT_SHAPE: [usize; 3] = [3, 32, 32];
pub const NUM_BLOCKS: usize = 4;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub gated: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running averages are updated.
    Train,
    /// Running statistics; the network is not mutated.
    Eval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBlock<T = f32> {
    pub spec: BlockSpec,
    pub weight: Tensor<T>,
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub weight: Var,
    pub gamma: Var,
    pub beta: Var,
}

/// Tape handles for every trainable tensor of an [`EmbeddingNet`].
#[derive(Clone, Debug)]
pub struct NetVars {
    pub blocks: Vec<BlockVars>,
}

impl NetVars {
    pub fn all(&self) -> Vec<Var> {
        self.blocks
            .iter()
            .flat_map(|b| [b.weight, b.gamma, b.beta])
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingNet<T = f32> {
    pub blocks: Vec<ConvBlock<T>>,
    pub input_shape: [usize; 3],
}

impl<T: Scalar> EmbeddingNet<T> {
    /// Builds the network with the last `decompose_depth` blocks gated.
    pub fn build<R: Rng + ?Sized>(
        channels: &[usize],
        decompose_depth: usize,
        input_shape: [usize; 3],
        rng: &mut R,
    ) -> Result<Self> {
        if channels.len() != NUM_BLOCKS {
            return Err(Error::config(format!(
                "expected {NUM_BLOCKS} block channel counts, got {}",
                channels.len()
            )));
        }
        if decompose_depth > NUM_BLOCKS {
            return Err(Error::config(format!(
                "decompose_depth must be in [0, {NUM_BLOCKS}], got {decompose_depth}"
            )));
        }
        if channels.contains(&0) {
            return Err(Error::config("block channel counts must be positive"));
        }
        let [_, h, w] = input_shape;
        if h >> (NUM_BLOCKS - 1) == 0 || w >> (NUM_BLOCKS - 1) == 0 {
            return Err(Error::config(format!("input {h}x{w} too small for {NUM_BLOCKS} blocks")));
        }
        let mut blocks = Vec::with_capacity(NUM_BLOCKS);
        let mut cin = input_shape[0];
        for (i, &cout) in channels.iter().enumerate() {
            let spec = BlockSpec {
                in_channels: cin,
                out_channels: cout,
                kernel_size: 3,
                stride: 1,
                gated: i >= NUM_BLOCKS - decompose_depth,
            };
            let fan_in = (cin * 9) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
            let weight = Tensor::from_fn([cout, cin, 3, 3], |_| T::of(normal.sample(rng)));
            blocks.push(ConvBlock {
                spec,
                weight,
                gamma: Tensor::full([cout], T::one()),
                beta: Tensor::zeros([cout]),
                running_mean: Tensor::zeros([cout]),
                running_var: Tensor::full([cout], T::one()),
            });
            cin = cout;
        }
        Ok(Self {
            blocks,
            input_shape,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.blocks.last().map_or(0, |b| b.spec.out_channels)
    }

    /// Out-channel counts of the gated blocks, in forward order.
    pub fn gated_channels(&self) -> Vec<usize> {
        self.blocks
            .iter()
            .filter(|b| b.spec.gated)
            .map(|b| b.spec.out_channels)
            .collect()
    }

    pub fn gated_filter_count(&self) -> usize {
        self.gated_channels().iter().sum()
    }

    pub fn decompose_depth(&self) -> usize {
        self.blocks.iter().filter(|b| b.spec.gated).count()
    }

    /// Re-marks the last `depth` blocks as gated. Parameters are untouched.
    pub fn set_decompose_depth(&mut self, depth: usize) -> Result<()> {
        let n = self.blocks.len();
        if depth > n {
            return Err(Error::config(format!(
                "decompose_depth must be in [0, {n}], got {depth}"
            )));
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.spec.gated = i >= n - depth;
        }
        Ok(())
    }

    /// Channel count of every block.
    pub fn channels(&self) -> Vec<usize> {
        self.blocks.iter().map(|b| b.spec.out_channels).collect()
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        self.blocks
            .iter()
            .flat_map(|b| [&b.weight, &b.gamma, &b.beta])
            .collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        self.blocks
            .iter_mut()
            .flat_map(|b| [&mut b.weight, &mut b.gamma, &mut b.beta])
            .collect()
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> NetVars {
        let blocks = self
            .blocks
            .iter()
            .map(|b| BlockVars {
                weight: tape.leaf(b.weight.clone(), trainable),
                gamma: tape.leaf(b.gamma.clone(), trainable),
                beta: tape.leaf(b.beta.clone(), trainable),
            })
            .collect();
        NetVars { blocks }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 4 || shape[1..] != self.input_shape {
            return Err(Error::dim(format!(
                "embedding input {shape:?} does not match [b, {}, {}, {}]",
                self.input_shape[0], self.input_shape[1], self.input_shape[2]
            )));
        }
        Ok(())
    }

    fn check_masks(&self, tape: &Tape<T>, masks: &[Var]) -> Result<()> {
        let gated = self.gated_channels();
        if masks.len() != gated.len() {
            return Err(Error::dim(format!(
                "{} masks for {} gated blocks",
                masks.len(),
                gated.len()
            )));
        }
        for (m, c) in masks.iter().zip(&gated) {
            if tape.shape(*m) != [*c] {
                return Err(Error::dim(format!(
                    "mask of shape {:?} for a gated block with {c} filters",
                    tape.shape(*m)
                )));
            }
        }
        Ok(())
    }

    /// One conv, batch-norm, relu, optional mask and pool step. Returns
    /// the post-activation map (before gating) and the block output.
    #[allow(clippy::too_many_arguments)]
    fn block_step(
        &self,
        tape: &mut Tape<T>,
        vars: &NetVars,
        i: usize,
        h: Var,
        mask: Option<Var>,
        mode: Mode,
        stats: &mut Vec<BatchStats>,
    ) -> Result<(Var, Var)> {
        let (block, bv) = (&self.blocks[i], &vars.blocks[i]);
        let conv = tape.conv2d(h, bv.weight, block.spec.stride, block.spec.kernel_size / 2)?;
        let normed = match mode {
            Mode::Train => {
                let (y, s) = tape.batch_norm_train(conv, bv.gamma, bv.beta)?;
                stats.push(s);
                y
            }
            Mode::Eval => tape.batch_norm_eval(
                conv,
                bv.gamma,
                bv.beta,
                block.running_mean.data(),
                block.running_var.data(),
            )?,
        };
        let act = tape.relu(normed);
        let gated = match mask {
            Some(m) => tape.mul(act, m)?,
            None => act,
        };
        let out = if i == self.blocks.len() - 1 {
            tape.global_avg_pool(gated)?
        } else {
            tape.max_pool_2d(gated, 2)?
        };
        Ok((act, out))
    }

    /// Shared forward. Returns the embedding, the per-block post-activation
    /// maps (before gating), and batch statistics in training mode.
    fn run(
        &self,
        tape: &mut Tape<T>,
        vars: &NetVars,
        x: Var,
        masks: Option<&[Var]>,
        mode: Mode,
    ) -> Result<(Var, Vec<Var>, Vec<BatchStats>)> {
        self.check_input(tape.shape(x))?;
        if let Some(m) = masks {
            self.check_masks(tape, m)?;
        }
        let mut gate_iter = masks.unwrap_or(&[]).iter();
        let mut h = x;
        let mut acts = Vec::with_capacity(NUM_BLOCKS);
        let mut stats = Vec::new();
        for i in 0..self.blocks.len() {
            let mask = if self.blocks[i].spec.gated && masks.is_some() {
                Some(*gate_iter.next().expect("mask count checked"))
            } else {
                None
            };
            let (act, out) = self.block_step(tape, vars, i, h, mask, mode, &mut stats)?;
            acts.push(act);
            h = out;
        }
        Ok((h, acts, stats))
    }

    /// Eval-mode forward of one batch along several mask settings at once.
    /// Blocks ahead of the first gated block are computed once and shared,
    /// which gives the same values as separate [`Self::forward_eval`] calls.
    pub fn forward_eval_paths(
        &self,
        tape: &mut Tape<T>,
        vars: &NetVars,
        x: Var,
        paths: &[Option<&[Var]>],
    ) -> Result<Vec<Var>> {
        self.check_input(tape.shape(x))?;
        for m in paths.iter().flatten() {
            self.check_masks(tape, m)?;
        }
        let mut none = Vec::new();
        let split = self
            .blocks
            .iter()
            .position(|b| b.spec.gated)
            .unwrap_or(self.blocks.len());
        let mut h = x;
        for i in 0..split {
            h = self.block_step(tape, vars, i, h, None, Mode::Eval, &mut none)?.1;
        }
        let mut outs = Vec::with_capacity(paths.len());
        for masks in paths {
            let mut gate_iter = masks.unwrap_or(&[]).iter();
            let mut p = h;
            for i in split..self.blocks.len() {
                let mask = masks.map(|_| *gate_iter.next().expect("mask count checked"));
                p = self.block_step(tape, vars, i, p, mask, Mode::Eval, &mut none)?.1;
            }
            outs.push(p);
        }
        Ok(outs)
    }

    fn absorb(&mut self, stats: &[BatchStats]) {
        for (block, s) in self.blocks.iter_mut().zip(stats) {
            let unbias = if s.count > 1 {
                s.count as f64 / (s.count - 1) as f64
            } else {
                1.0
            };
            let rm = block.running_mean.data_mut();
            for (r, m) in rm.iter_mut().zip(&s.mean) {
                *r = T::of((1.0 - BN_MOMENTUM) * r.as_f64() + BN_MOMENTUM * m);
            }
            let rv = block.running_var.data_mut();
            for (r, v) in rv.iter_mut().zip(&s.var) {
                *r = T::of((1.0 - BN_MOMENTUM) * r.as_f64() + BN_MOMENTUM * v * unbias);
            }
        }
    }

    /// Forward with optional per-gated-block channel masks. In
    /// [`Mode::Train`] the running batch-norm statistics are updated.
    pub fn forward(
        &mut self,
        tape: &mut Tape<T>,
        vars: &NetVars,
        x: Var,
        masks: Option<&[Var]>,
        mode: Mode,
    ) -> Result<Var> {
        let (out, _, stats) = self.run(tape, vars, x, masks, mode)?;
        self.absorb(&stats);
        Ok(out)
    }

    /// Ungated (standard) path.
    pub fn forward_std(&mut self, tape: &mut Tape<T>, vars: &NetVars, x: Var, mode: Mode) -> Result<Var> {
        self.forward(tape, vars, x, None, mode)
    }

    /// Gated path: after each gated block's activation, channel `i` is
    /// multiplied by `mask[i]`.
    pub fn forward_gated(
        &mut self,
        tape: &mut Tape<T>,
        vars: &NetVars,
        x: Var,
        masks: &[Var],
        mode: Mode,
    ) -> Result<Var> {
        self.forward(tape, vars, x, Some(masks), mode)
    }

    /// Eval-mode forward that leaves the network untouched.
    pub fn forward_eval(&self, tape: &mut Tape<T>, vars: &NetVars, x: Var, masks: Option<&[Var]>) -> Result<Var> {
        Ok(self.run(tape, vars, x, masks, Mode::Eval)?.0)
    }

    /// Eval-mode forward that also returns each block's post-activation map.
    pub fn forward_eval_traced(
        &self,
        tape: &mut Tape<T>,
        vars: &NetVars,
        x: Var,
        masks: Option<&[Var]>,
    ) -> Result<(Var, Vec<Var>)> {
        let (out, acts, _) = self.run(tape, vars, x, masks, Mode::Eval)?;
        Ok((out, acts))
    }

    /// Embeds a batch along several mask settings, sharing the ungated
    /// prefix.
    pub fn embed_paths(&self, images: &Tensor<T>, paths: &[Option<&[Tensor<T>]>]) -> Result<Vec<Tensor<T>>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let mvars: Vec<Option<Vec<Var>>> = paths
            .iter()
            .map(|p| p.map(|ms| ms.iter().map(|m| tape.constant(m.clone())).collect()))
            .collect();
        let refs: Vec<Option<&[Var]>> = mvars.iter().map(|m| m.as_deref()).collect();
        let outs = self.forward_eval_paths(&mut tape, &vars, x, &refs)?;
        Ok(outs.into_iter().map(|o| tape.value(o).clone()).collect())
    }

    /// Embeds a batch without recording gradients.
    pub fn embed(&self, images: &Tensor<T>, masks: Option<&[Tensor<T>]>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let mvars: Option<Vec<Var>> =
            masks.map(|ms| ms.iter().map(|m| tape.constant(m.clone())).collect());
        let out = self.forward_eval(&mut tape, &vars, x, mvars.as_deref())?;
        Ok(tape.value(out).clone())
    }
}

/// Linear layer `feats [n, d] -> logits [n, classes]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead<T = f32> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> LinearHead<T> {
    pub fn new<R: Rng + ?Sized>(in_dim: usize, classes: usize, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, 0.01).expect("finite std");
        Self {
            weight: Tensor::from_fn([in_dim, classes], |_| T::of(normal.sample(rng))),
            bias: Tensor::zeros([classes]),
        }
    }

    pub fn zeros(in_dim: usize, classes: usize) -> Self {
        Self {
            weight: Tensor::zeros([in_dim, classes]),
            bias: Tensor::zeros([classes]),
        }
    }

    pub fn classes(&self) -> usize {
        self.bias.numel()
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        vec![&self.weight, &self.bias]
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> [Var; 2] {
        [
            tape.leaf(self.weight.clone(), trainable),
            tape.leaf(self.bias.clone(), trainable),
        ]
    }

    pub fn logits(tape: &mut Tape<T>, vars: [Var; 2], feats: Var) -> Result<Var> {
        let z = tape.matmul(feats, vars[0])?;
        tape.add(z, vars[1])
    }
}

/// Pretraining forward: embedding followed by a linear classifier over the
/// source training classes.
pub fn pretrain_forward<T: Scalar>(
    net: &mut EmbeddingNet<T>,
    head: &LinearHead<T>,
    tape: &mut Tape<T>,
    net_vars: &NetVars,
    head_vars: [Var; 2],
    images: Var,
    mode: Mode,
) -> Result<Var> {
    if head.weight.shape()[0] != net.feature_dim() {
        return Err(Error::config(format!(
            "pretraining head expects {} features, net produces {}",
            head.weight.shape()[0],
            net.feature_dim()
        )));
    }
    let feats = net.forward_std(tape, net_vars, images, mode)?;
    LinearHead::logits(tape, head_vars, feats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn net(depth: usize) -> EmbeddingNet<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        EmbeddingNet::build(&DEFAULT_CHANNELS, depth, INPUT_SHAPE, &mut rng).unwrap()
    }

    fn images(b: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn([b, 3, 32, 32], |_| rng.random::<f32>())
    }

    #[test]
    fn gated_filter_counts() {
        assert_eq!(net(2).gated_filter_count(), 64 + 128);
        assert_eq!(net(0).gated_filter_count(), 0);
        assert_eq!(net(4).gated_filter_count(), 16 + 32 + 64 + 128);
        assert_eq!(net(2).gated_channels(), vec![64, 128]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            EmbeddingNet::<f32>::build(&DEFAULT_CHANNELS, 5, INPUT_SHAPE, &mut rng),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn forward_shape_contract() {
        let mut n = net(2);
        for b in &mut n.blocks[3..] {
            b.weight = Tensor::zeros(b.weight.shape().to_vec());
        }
        let out = n.embed(&Tensor::zeros([3, 3, 32, 32]), None).unwrap();
        assert_eq!(out.shape(), &[3, 128]);
        let mut tape = Tape::new();
        let vars = n.bind(&mut tape, true);
        let x = tape.constant(Tensor::zeros([3, 3, 32, 32]));
        let y = n.forward_std(&mut tape, &vars, x, Mode::Train).unwrap();
        assert_eq!(tape.shape(y), &[3, 128]);
    }

    #[test]
    fn wrong_input_shape_rejected() {
        let n = net(2);
        assert!(matches!(
            n.embed(&Tensor::zeros([1, 3, 16, 16]), None),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn duplicated_inputs_embed_identically() {
        let n = net(2);
        let one = images(1, 5);
        let mut data = one.data().to_vec();
        data.extend_from_slice(one.data());
        let out = n.embed(&Tensor::new([2, 3, 32, 32], data).unwrap(), None).unwrap();
        assert_eq!(out.row(0), out.row(1));
    }

    #[test]
    fn ones_masks_match_std_path() {
        let n = net(2);
        let x = images(4, 9);
        let ones: Vec<Tensor<f32>> = n.gated_channels().iter().map(|c| Tensor::full([*c], 1.0)).collect();
        assert_eq!(n.embed(&x, None).unwrap(), n.embed(&x, Some(&ones)).unwrap());
    }

    #[test]
    fn zero_mask_on_last_block_annihilates_embedding() {
        let n = net(2);
        let x = images(2, 11);
        let masks = vec![Tensor::full([64], 1.0), Tensor::zeros([128])];
        let out = n.embed(&x, Some(&masks)).unwrap();
        assert!(out.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn mask_length_mismatch_rejected() {
        let n = net(2);
        let masks = vec![Tensor::full([64], 1.0), Tensor::zeros([127])];
        assert!(matches!(
            n.embed(&images(1, 1), Some(&masks)),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            n.embed(&images(1, 1), Some(&masks[..1])),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn train_forward_updates_running_stats_eval_does_not() {
        let mut n = net(2);
        let before = n.clone();
        let mut tape = Tape::new();
        let vars = n.bind(&mut tape, false);
        let x = tape.constant(images(2, 3));
        n.forward_std(&mut tape, &vars, x, Mode::Eval).unwrap();
        assert_eq!(n, before);
        n.forward_std(&mut tape, &vars, x, Mode::Train).unwrap();
        assert_ne!(n.blocks[0].running_mean, before.blocks[0].running_mean);
    }

    #[test]
    fn pretrain_logits_shape_and_head_check() {
        let mut n = net(0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let head = LinearHead::new(128, 20, &mut rng);
        let mut tape = Tape::new();
        let nv = n.bind(&mut tape, true);
        let hv = head.bind(&mut tape, true);
        let x = tape.constant(images(3, 2));
        let y = pretrain_forward(&mut n, &head, &mut tape, &nv, hv, x, Mode::Train).unwrap();
        assert_eq!(tape.shape(y), &[3, 20]);

        let bad = LinearHead::new(64, 20, &mut rng);
        let hv = bad.bind(&mut tape, true);
        assert!(matches!(
            pretrain_forward(&mut n, &bad, &mut tape, &nv, hv, x, Mode::Train),
            Err(Error::Config(_))
        ));
    }
}
