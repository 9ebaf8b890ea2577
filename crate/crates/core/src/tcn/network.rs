use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{
    conv_batch, conv_batch_backward, dropout_fwd, relu, relu_backward, BatchNorm, BnCache, Conv1d,
    Dense, Mode,
};
use super::{real, ArchConfig, FeatureMap, Real};
use crate::error::{Error, Result};
use crate::parallel::{self, Execution};

/// Callback for [`Network::visit`]: name, role, shape, values.
pub type Visitor<'a, T> = dyn FnMut(&str, TensorRole, &[usize], &[T]) + 'a;

type BnOutput<T> = (Vec<FeatureMap<T>>, Option<BnCache<T>>);

/// Skip path of a residual block whose input and output depths differ.
#[derive(Debug, Clone, PartialEq)]
pub struct SkipBranch<T> {
    pub conv: Conv1d<T>,
    pub bn: Option<BatchNorm<T>>,
}

/// conv -> BN -> ReLU -> dropout -> conv -> BN, added to the skip path, then ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualBlock<T> {
    pub dilation: usize,
    pub conv1: Conv1d<T>,
    pub bn1: Option<BatchNorm<T>>,
    pub conv2: Conv1d<T>,
    pub bn2: Option<BatchNorm<T>>,
    pub skip: Option<SkipBranch<T>>,
}

/// Entry 1x1 convolution, residual blocks, channel-major flatten, dense head.
///
/// Batch-norm layers are optional so that a folded network shares the type.
#[derive(Debug, Clone, PartialEq)]
pub struct Network<T> {
    pub arch: ArchConfig,
    pub entry: Conv1d<T>,
    pub blocks: Vec<ResidualBlock<T>>,
    pub head: Dense<T>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TensorRole {
    Weight,
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl TensorRole {
    pub fn trainable(self) -> bool {
        !matches!(self, TensorRole::RunningMean | TensorRole::RunningVar)
    }
}

fn bn_train<T: Real>(bn: &Option<BatchNorm<T>>, h: &[FeatureMap<T>]) -> Result<BnOutput<T>> {
    match bn {
        Some(bn) => {
            let (y, cache) = bn.forward_train(h)?;
            Ok((y, Some(cache)))
        }
        None => Ok((h.to_vec(), None)),
    }
}

fn bn_back<T: Real>(
    bn: &Option<BatchNorm<T>>,
    dy: Vec<FeatureMap<T>>,
    cache: &Option<BnCache<T>>,
    grad: &mut Option<BatchNorm<T>>,
) -> Vec<FeatureMap<T>> {
    match (bn, cache, grad) {
        (Some(bn), Some(cache), Some(g)) => bn.backward(&dy, cache, g),
        _ => dy,
    }
}

fn bn_eval<T: Real>(bn: &Option<BatchNorm<T>>, h: FeatureMap<T>) -> Result<FeatureMap<T>> {
    match bn {
        Some(bn) => bn.forward_eval(&h),
        None => Ok(h),
    }
}

struct BlockTape<T> {
    input: Vec<FeatureMap<T>>,
    bn1: Option<BnCache<T>>,
    n1: Vec<FeatureMap<T>>,
    masks: Vec<Option<Vec<T>>>,
    d1: Vec<FeatureMap<T>>,
    bn2: Option<BnCache<T>>,
    skip_bn: Option<BnCache<T>>,
    sum: Vec<FeatureMap<T>>,
}

/// Activations recorded by a training-mode forward pass.
pub struct Tape<T> {
    input: Vec<FeatureMap<T>>,
    blocks: Vec<BlockTape<T>>,
    features: Vec<FeatureMap<T>>,
    pub logits: Vec<Vec<T>>,
}

impl<T: Real> Tape<T> {
    /// Batch statistics of every BN layer in network order, for running-stat updates.
    fn bn_caches(&self) -> Vec<Option<&BnCache<T>>> {
        let mut out = Vec::new();
        for b in &self.blocks {
            out.push(b.bn1.as_ref());
            out.push(b.bn2.as_ref());
            out.push(b.skip_bn.as_ref());
        }
        out
    }

    /// Whether each ReLU input is positive, in network order. Two tapes with
    /// equal patterns lie in the same linear piece of every ReLU.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.blocks
            .iter()
            .flat_map(|b| b.n1.iter().chain(&b.sum))
            .flat_map(|m| m.data.iter().map(|&v| v > T::zero()))
            .collect()
    }
}

pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = logits.iter().map(|&v| (v - m).exp()).collect();
    let s: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / s).collect()
}

impl<T: Real> Network<T> {
    /// He-uniform initialized network; the first block gets a 1x1 skip
    /// convolution (with BN) exactly when its input depth differs from
    /// `block_filters`.
    pub fn build(arch: &ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let entry = Conv1d::he_init(1, arch.entry_filters, 1, 1, &mut rng);
        let mut blocks = Vec::with_capacity(arch.levels);
        let mut in_ch = arch.entry_filters;
        for d in arch.dilations() {
            let ft = arch.block_filters;
            let conv1 = Conv1d::he_init(in_ch, ft, arch.block_kernel, d, &mut rng);
            let conv2 = Conv1d::he_init(ft, ft, arch.block_kernel, d, &mut rng);
            let skip = (in_ch != ft).then(|| SkipBranch {
                conv: Conv1d::he_init(in_ch, ft, 1, 1, &mut rng),
                bn: Some(BatchNorm::new(ft, arch.bn_eps, arch.bn_momentum)),
            });
            blocks.push(ResidualBlock {
                dilation: d,
                conv1,
                bn1: Some(BatchNorm::new(ft, arch.bn_eps, arch.bn_momentum)),
                conv2,
                bn2: Some(BatchNorm::new(ft, arch.bn_eps, arch.bn_momentum)),
                skip,
            });
            in_ch = ft;
        }
        let head = Dense::he_init(
            arch.feature_channels() * arch.input_len,
            arch.n_classes,
            &mut rng,
        );
        Ok(Self {
            arch: arch.clone(),
            entry,
            blocks,
            head,
        })
    }

    pub fn cast<U: Real>(&self) -> Network<U> {
        Network {
            arch: self.arch.clone(),
            entry: self.entry.cast(),
            blocks: self
                .blocks
                .iter()
                .map(|b| ResidualBlock {
                    dilation: b.dilation,
                    conv1: b.conv1.cast(),
                    bn1: b.bn1.as_ref().map(BatchNorm::cast),
                    conv2: b.conv2.cast(),
                    bn2: b.bn2.as_ref().map(BatchNorm::cast),
                    skip: b.skip.as_ref().map(|s| SkipBranch {
                        conv: s.conv.cast(),
                        bn: s.bn.as_ref().map(BatchNorm::cast),
                    }),
                })
                .collect(),
            head: self.head.cast(),
        }
    }

    /// Same structure with every tensor zeroed; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.visit_mut(&mut |_, _, t| t.iter_mut().for_each(|v| *v = T::zero()));
        z
    }

    pub fn bn_count(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| {
                b.bn1.is_some() as usize
                    + b.bn2.is_some() as usize
                    + b.skip.as_ref().map_or(0, |s| s.bn.is_some() as usize)
            })
            .sum()
    }

    /// Visits every tensor with its stable name, role and shape.
    pub fn visit(&self, f: &mut Visitor<T>) {
        fn conv<T>(f: &mut Visitor<T>, p: &str, c: &Conv1d<T>) {
            f(
                &format!("{p}.weight"),
                TensorRole::Weight,
                &[c.out_ch, c.in_ch, c.kernel],
                &c.weight,
            );
            f(&format!("{p}.bias"), TensorRole::Bias, &[c.out_ch], &c.bias);
        }
        fn bn<T>(f: &mut Visitor<T>, p: &str, b: &BatchNorm<T>) {
            let n = [b.gamma.len()];
            f(&format!("{p}.gamma"), TensorRole::Gamma, &n, &b.gamma);
            f(&format!("{p}.beta"), TensorRole::Beta, &n, &b.beta);
            f(
                &format!("{p}.running_mean"),
                TensorRole::RunningMean,
                &n,
                &b.running_mean,
            );
            f(
                &format!("{p}.running_var"),
                TensorRole::RunningVar,
                &n,
                &b.running_var,
            );
        }
        conv(f, "entry", &self.entry);
        for (i, b) in self.blocks.iter().enumerate() {
            conv(f, &format!("block{i}.conv1"), &b.conv1);
            if let Some(n) = &b.bn1 {
                bn(f, &format!("block{i}.bn1"), n);
            }
            conv(f, &format!("block{i}.conv2"), &b.conv2);
            if let Some(n) = &b.bn2 {
                bn(f, &format!("block{i}.bn2"), n);
            }
            if let Some(s) = &b.skip {
                conv(f, &format!("block{i}.skip.conv"), &s.conv);
                if let Some(n) = &s.bn {
                    bn(f, &format!("block{i}.skip.bn"), n);
                }
            }
        }
        let h = &self.head;
        f(
            "head.weight",
            TensorRole::Weight,
            &[h.out_features, h.in_features],
            &h.weight,
        );
        f("head.bias", TensorRole::Bias, &[h.out_features], &h.bias);
    }

    /// Mutable counterpart of [`Network::visit`], same order and names.
    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, TensorRole, &mut Vec<T>)) {
        fn conv<T>(f: &mut dyn FnMut(&str, TensorRole, &mut Vec<T>), p: &str, c: &mut Conv1d<T>) {
            f(&format!("{p}.weight"), TensorRole::Weight, &mut c.weight);
            f(&format!("{p}.bias"), TensorRole::Bias, &mut c.bias);
        }
        fn bn<T>(f: &mut dyn FnMut(&str, TensorRole, &mut Vec<T>), p: &str, b: &mut BatchNorm<T>) {
            f(&format!("{p}.gamma"), TensorRole::Gamma, &mut b.gamma);
            f(&format!("{p}.beta"), TensorRole::Beta, &mut b.beta);
            f(
                &format!("{p}.running_mean"),
                TensorRole::RunningMean,
                &mut b.running_mean,
            );
            f(
                &format!("{p}.running_var"),
                TensorRole::RunningVar,
                &mut b.running_var,
            );
        }
        conv(f, "entry", &mut self.entry);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            conv(f, &format!("block{i}.conv1"), &mut b.conv1);
            if let Some(n) = &mut b.bn1 {
                bn(f, &format!("block{i}.bn1"), n);
            }
            conv(f, &format!("block{i}.conv2"), &mut b.conv2);
            if let Some(n) = &mut b.bn2 {
                bn(f, &format!("block{i}.bn2"), n);
            }
            if let Some(s) = &mut b.skip {
                conv(f, &format!("block{i}.skip.conv"), &mut s.conv);
                if let Some(n) = &mut s.bn {
                    bn(f, &format!("block{i}.skip.bn"), n);
                }
            }
        }
        f("head.weight", TensorRole::Weight, &mut self.head.weight);
        f("head.bias", TensorRole::Bias, &mut self.head.bias);
    }

    /// Learnable element count (weights, biases, gamma, beta).
    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, role, _, t| {
            if role.trainable() {
                n += t.len()
            }
        });
        n
    }

    fn check_input(&self, x: &FeatureMap<T>) -> Result<()> {
        if x.channels != 1 || x.length != self.arch.input_len {
            return Err(Error::Shape(format!(
                "network expects 1x{}, got {}x{}",
                self.arch.input_len, x.channels, x.length
            )));
        }
        Ok(())
    }

    /// Eval-mode forward pass that reports every activation edge to `observe`.
    ///
    /// Edge names: `input`, `entry`, `block{i}.conv1` (after ReLU),
    /// `block{i}.conv2` (before the add), `block{i}.skip` (when a skip conv
    /// exists), `block{i}.out` and `logits` (as an `n_classes x 1` map).
    pub fn forward_observed(
        &self,
        x: &FeatureMap<T>,
        observe: &mut dyn FnMut(&str, &FeatureMap<T>),
    ) -> Result<Vec<T>> {
        self.check_input(x)?;
        observe("input", x);
        let mut h = self.entry.forward(x)?;
        observe("entry", &h);
        for (i, b) in self.blocks.iter().enumerate() {
            let a = relu(&bn_eval(&b.bn1, b.conv1.forward(&h)?)?);
            observe(&format!("block{i}.conv1"), &a);
            let m = bn_eval(&b.bn2, b.conv2.forward(&a)?)?;
            observe(&format!("block{i}.conv2"), &m);
            let s = match &b.skip {
                Some(sk) => {
                    let s = bn_eval(&sk.bn, sk.conv.forward(&h)?)?;
                    observe(&format!("block{i}.skip"), &s);
                    s
                }
                None => h,
            };
            h = relu(&m.add(&s)?);
            observe(&format!("block{i}.out"), &h);
        }
        let logits = self.head.forward(&h.data)?;
        observe("logits", &FeatureMap::new(logits.len(), 1, logits.clone())?);
        Ok(logits)
    }

    /// Eval-mode logits for one input.
    pub fn forward(&self, x: &FeatureMap<T>) -> Result<Vec<T>> {
        self.forward_observed(x, &mut |_, _| {})
    }

    pub fn forward_batch(&self, xs: &[FeatureMap<T>], exec: Execution) -> Result<Vec<Vec<T>>> {
        parallel::map(exec, xs, |x| self.forward(x))
            .into_iter()
            .collect()
    }

    /// Predicted 1-based class per input (ties to the lowest class).
    pub fn predict_batch(&self, xs: &[FeatureMap<T>], exec: Execution) -> Result<Vec<usize>> {
        Ok(self
            .forward_batch(xs, exec)?
            .iter()
            .map(|l| argmax(l) + 1)
            .collect())
    }

    /// Training-mode forward pass: batch statistics in BN, dropout drawn from `rng`.
    pub fn forward_train<R: Rng + ?Sized>(
        &self,
        xs: &[FeatureMap<T>],
        rng: &mut R,
        exec: Execution,
    ) -> Result<Tape<T>> {
        for x in xs {
            self.check_input(x)?;
        }
        let mut h = conv_batch(&self.entry, xs, exec)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let h1 = conv_batch(&b.conv1, &h, exec)?;
            let (n1, bn1) = bn_train(&b.bn1, &h1)?;
            let mut masks = Vec::with_capacity(n1.len());
            let mut d1 = Vec::with_capacity(n1.len());
            for n in &n1 {
                let (d, m) = dropout_fwd(&relu(n), self.arch.dropout_p, rng, Mode::Train);
                d1.push(d);
                masks.push(m);
            }
            let h2 = conv_batch(&b.conv2, &d1, exec)?;
            let (n2, bn2) = bn_train(&b.bn2, &h2)?;
            let (skip_out, skip_bn) = match &b.skip {
                Some(sk) => {
                    let sh = conv_batch(&sk.conv, &h, exec)?;
                    bn_train(&sk.bn, &sh)?
                }
                None => (h.clone(), None),
            };
            let sum: Vec<FeatureMap<T>> = n2
                .iter()
                .zip(&skip_out)
                .map(|(a, s)| a.add(s))
                .collect::<Result<_>>()?;
            let out: Vec<FeatureMap<T>> = sum.iter().map(relu).collect();
            blocks.push(BlockTape {
                input: h,
                bn1,
                n1,
                masks,
                d1,
                bn2,
                skip_bn,
                sum,
            });
            h = out;
        }
        let logits = h
            .iter()
            .map(|f| self.head.forward(&f.data))
            .collect::<Result<Vec<_>>>()?;
        Ok(Tape {
            input: xs.to_vec(),
            blocks,
            features: h,
            logits,
        })
    }

    /// Gradients of a loss whose logit gradient is `dlogits`, as a
    /// network-shaped accumulator (running statistics stay zero).
    pub fn backward(&self, tape: &Tape<T>, dlogits: &[Vec<T>], exec: Execution) -> Network<T> {
        let mut g = self.zeros_like();
        let mut dh: Vec<FeatureMap<T>> = tape
            .features
            .iter()
            .zip(dlogits)
            .map(|(f, dl)| {
                let dx = self.head.backward(&f.data, dl, &mut g.head);
                FeatureMap {
                    channels: f.channels,
                    length: f.length,
                    data: dx,
                }
            })
            .collect();

        for (bi, (b, bt)) in self.blocks.iter().zip(&tape.blocks).enumerate().rev() {
            let gb = &mut g.blocks[bi];
            let dsum: Vec<FeatureMap<T>> = bt
                .sum
                .iter()
                .zip(&dh)
                .map(|(s, d)| relu_backward(s, d))
                .collect();

            let dh2 = bn_back(&b.bn2, dsum.clone(), &bt.bn2, &mut gb.bn2);
            let dd1 = conv_batch_backward(&b.conv2, &bt.d1, &dh2, &mut gb.conv2, exec);
            let dn1: Vec<FeatureMap<T>> = dd1
                .into_iter()
                .zip(&bt.masks)
                .zip(&bt.n1)
                .map(|((mut d, mask), pre)| {
                    if let Some(m) = mask {
                        for (v, &k) in d.data.iter_mut().zip(m) {
                            *v = *v * k;
                        }
                    }
                    relu_backward(pre, &d)
                })
                .collect();
            let dh1 = bn_back(&b.bn1, dn1, &bt.bn1, &mut gb.bn1);
            let mut din = conv_batch_backward(&b.conv1, &bt.input, &dh1, &mut gb.conv1, exec);

            let dskip = match (&b.skip, &mut gb.skip) {
                (Some(sk), Some(gs)) => {
                    let dsh = bn_back(&sk.bn, dsum, &bt.skip_bn, &mut gs.bn);
                    conv_batch_backward(&sk.conv, &bt.input, &dsh, &mut gs.conv, exec)
                }
                _ => dsum,
            };
            for (d, s) in din.iter_mut().zip(&dskip) {
                for (a, &b) in d.data.iter_mut().zip(&s.data) {
                    *a = *a + b;
                }
            }
            dh = din;
        }
        conv_batch_backward(&self.entry, &tape.input, &dh, &mut g.entry, exec);
        g
    }

    /// Folds a training batch's statistics into the running BN estimates.
    pub fn update_running_stats(&mut self, tape: &Tape<T>) {
        let caches = tape.bn_caches();
        let mut it = caches.into_iter();
        for b in &mut self.blocks {
            let (c1, c2, cs) = (
                it.next().flatten(),
                it.next().flatten(),
                it.next().flatten(),
            );
            if let (Some(bn), Some(c)) = (&mut b.bn1, c1) {
                bn.update_running(c);
            }
            if let (Some(bn), Some(c)) = (&mut b.bn2, c2) {
                bn.update_running(c);
            }
            if let Some(Some(bn)) = b.skip.as_mut().map(|s| s.bn.as_mut()) {
                if let Some(c) = cs {
                    bn.update_running(c);
                }
            }
        }
    }

    /// Mean cross-entropy of a batch and its gradients, without touching `self`.
    pub fn loss_and_grad<R: Rng + ?Sized>(
        &self,
        xs: &[FeatureMap<T>],
        labels: &[usize],
        rng: &mut R,
        exec: Execution,
    ) -> Result<(T, Network<T>, Tape<T>)> {
        if xs.is_empty() || xs.len() != labels.len() {
            return Err(Error::Usage(format!(
                "{} inputs for {} labels",
                xs.len(),
                labels.len()
            )));
        }
        let tape = self.forward_train(xs, rng, exec)?;
        let n: T = real(xs.len() as f64);
        let mut loss = T::zero();
        let mut dlogits = Vec::with_capacity(xs.len());
        for (l, &y) in tape.logits.iter().zip(labels) {
            loss = loss + super::train::cross_entropy(l, y);
            let p = softmax(l);
            let mut d = p;
            d[y - 1] = d[y - 1] - T::one();
            dlogits.push(d.into_iter().map(|v| v / n).collect());
        }
        let grads = self.backward(&tape, &dlogits, exec);
        Ok((loss / n, grads, tape))
    }
}

pub fn argmax<T: PartialOrd + Copy>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}
