//! A small conditional noise-prediction U-Net: two downsampling stages,
//! sinusoidal timestep embedding, discrete (subject, action) condition codes
//! mapped through learned embedding tables, and optional low-rank adapters
//! on every convolution and dense layer.

use crate::diffusion::NoisePredictor;
use crate::error::{Error, Result};
use crate::nn::{
    silu, silu_prime, sinusoidal_embedding, upsample2, upsample2_backward, Conv2d, GradStore,
    GroupNorm, GroupNormCache, Linear, LoraAdapter,
};
use crate::tensor::ImageTensor;
use ndarray::{Array1, Array2, Array3};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Layer sizes and vocabulary of the denoiser.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    /// Channel widths at full, half, and quarter resolution.
    pub widths: [usize; 3],
    pub emb_dim: usize,
    pub sin_dim: usize,
    /// Condition vector length; half carries the subject, half the action.
    pub cond_dim: usize,
    pub n_subjects: usize,
    pub n_actions: usize,
    pub groups: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            in_channels: 3,
            height: 64,
            width: 64,
            widths: [32, 64, 128],
            emb_dim: 128,
            sin_dim: 64,
            cond_dim: 32,
            n_subjects: 8,
            n_actions: 15,
            groups: 8,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height % 4 != 0 || self.width % 4 != 0 || self.height < 8 || self.width < 8 {
            return Err(Error::Config(format!(
                "spatial size {}x{} must be a multiple of 4 and at least 8",
                self.height, self.width
            )));
        }
        if self.widths.iter().any(|w| w % self.groups != 0) {
            return Err(Error::Config(format!(
                "widths {:?} must divide into {} norm groups",
                self.widths, self.groups
            )));
        }
        if self.cond_dim % 2 != 0 || self.sin_dim % 2 != 0 {
            return Err(Error::Config("cond_dim and sin_dim must be even".into()));
        }
        Ok(())
    }
}

/// A condition vector plus the discrete code it came from (None for the
/// unconditional branch). Keeping the code lets training route gradients
/// back into the embedding tables.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionEmbedding {
    pub vector: Array1<f64>,
    pub code: Option<(usize, usize)>,
}

/// Conv -> GroupNorm -> +embedding projection -> SiLU, with an identity
/// residual when shapes permit.
#[derive(Debug, Clone)]
struct ConvBlock {
    conv: Conv2d,
    norm: GroupNorm,
    emb_proj: Linear,
    residual: bool,
}

struct BlockCache {
    x: Array3<f64>,
    gn: GroupNormCache,
    pre: Array3<f64>,
}

impl ConvBlock {
    fn new(
        cout: usize,
        cin: usize,
        k: usize,
        stride: usize,
        emb_dim: usize,
        groups: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            conv: Conv2d::new(cout, cin, k, stride, rng),
            norm: GroupNorm::new(cout, groups),
            emb_proj: Linear::new(cout, emb_dim, rng),
            residual: cin == cout && stride == 1,
        }
    }

    fn forward(&self, x: &Array3<f64>, e: &Array1<f64>) -> (Array3<f64>, BlockCache) {
        let h = self.conv.forward(x);
        let (hn, gn) = self.norm.forward(&h);
        let p = self.emb_proj.forward(e);
        let mut pre = hn;
        for c in 0..pre.dim().0 {
            let pc = p[c];
            pre.index_axis_mut(ndarray::Axis(0), c)
                .mapv_inplace(|v| v + pc);
        }
        let mut y = pre.mapv(silu);
        if self.residual {
            y += x;
        }
        (
            y,
            BlockCache {
                x: x.clone(),
                gn,
                pre,
            },
        )
    }

    /// Returns (dx, d_embedding).
    fn backward(
        &self,
        cache: &BlockCache,
        e: &Array1<f64>,
        dy: &Array3<f64>,
        prefix: &str,
        grads: &mut GradStore,
    ) -> (Array3<f64>, Array1<f64>) {
        let mut dpre = dy.clone();
        ndarray::Zip::from(&mut dpre)
            .and(&cache.pre)
            .for_each(|d, &p| *d *= silu_prime(p));
        let cout = dpre.dim().0;
        let mut dp = Array1::zeros(cout);
        for c in 0..cout {
            dp[c] = dpre.index_axis(ndarray::Axis(0), c).sum();
        }
        let de = self
            .emb_proj
            .backward(e, &dp, &format!("{prefix}.emb_proj"), grads);
        let dh = self
            .norm
            .backward(&cache.gn, &dpre, &format!("{prefix}.norm"), grads);
        let mut dx = self
            .conv
            .backward(&cache.x, &dh, &format!("{prefix}.conv"), grads);
        if self.residual {
            dx += dy;
        }
        (dx, de)
    }
}

/// Which layers carry adapters and at what rank. Per-layer ranks are clamped
/// so they stay well below the layer's smaller dimension.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub rank: usize,
    pub targets: Vec<String>,
}

/// Base weights plus optional low-rank adapters.
#[derive(Debug, Clone)]
pub struct DenoiserModel {
    pub arch: ArchConfig,
    pub adapter_spec: Option<AdapterSpec>,
    subject_table: Array2<f64>,
    action_table: Array2<f64>,
    null_embedding: Array1<f64>,
    time_lin1: Linear,
    time_lin2: Linear,
    cond_lin: Linear,
    enc0: ConvBlock,
    down1: ConvBlock,
    down2: ConvBlock,
    mid: ConvBlock,
    up1_reduce: Conv2d,
    dec1: ConvBlock,
    up2_reduce: Conv2d,
    dec0: ConvBlock,
    out_conv: Conv2d,
}

/// Every adapter-capable layer, in parameter order.
pub const ADAPTER_TARGETS: [&str; 12] = [
    "time_lin1",
    "time_lin2",
    "cond_lin",
    "enc0.conv",
    "down1.conv",
    "down2.conv",
    "mid.conv",
    "up1_reduce",
    "dec1.conv",
    "up2_reduce",
    "dec0.conv",
    "out_conv",
];

pub struct Tape {
    code: Option<(usize, usize)>,
    cond_vector: Array1<f64>,
    sin_t: Array1<f64>,
    tl1_pre: Array1<f64>,
    tl1_act: Array1<f64>,
    e_pre: Array1<f64>,
    e: Array1<f64>,
    c_enc0: BlockCache,
    c_down1: BlockCache,
    c_down2: BlockCache,
    c_mid: BlockCache,
    h3: Array3<f64>,
    c_dec1: BlockCache,
    h4: Array3<f64>,
    c_dec0: BlockCache,
    h5: Array3<f64>,
}

impl DenoiserModel {
    /// Fresh model with seeded random init. The output convolution starts
    /// at zero so an untrained model predicts zero noise.
    pub fn new(arch: ArchConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        arch.validate()?;
        use rand::Rng;
        let half = arch.cond_dim / 2;
        let [w0, w1, w2] = arch.widths;
        let normal =
            |rng: &mut ChaCha8Rng| -> f64 { rng.sample(rand_distr::StandardNormal) };
        let subject_table = Array2::from_shape_fn((arch.n_subjects, half), |_| normal(rng));
        let action_table = Array2::from_shape_fn((arch.n_actions, half), |_| normal(rng));
        let null_embedding = Array1::from_shape_fn(arch.cond_dim, |_| normal(rng));
        let out_conv = {
            let mut conv = Conv2d::new(arch.in_channels, w0, 3, 1, rng);
            conv.w.fill(0.0);
            conv
        };
        Ok(Self {
            time_lin1: Linear::new(arch.emb_dim, arch.sin_dim, rng),
            time_lin2: Linear::new(arch.emb_dim, arch.emb_dim, rng),
            cond_lin: Linear::new(arch.emb_dim, arch.cond_dim, rng),
            enc0: ConvBlock::new(w0, arch.in_channels, 3, 1, arch.emb_dim, arch.groups, rng),
            down1: ConvBlock::new(w1, w0, 3, 2, arch.emb_dim, arch.groups, rng),
            down2: ConvBlock::new(w2, w1, 3, 2, arch.emb_dim, arch.groups, rng),
            mid: ConvBlock::new(w2, w2, 3, 1, arch.emb_dim, arch.groups, rng),
            up1_reduce: Conv2d::new(w1, w2, 1, 1, rng),
            dec1: ConvBlock::new(w1, w1, 3, 1, arch.emb_dim, arch.groups, rng),
            up2_reduce: Conv2d::new(w0, w1, 1, 1, rng),
            dec0: ConvBlock::new(w0, w0, 3, 1, arch.emb_dim, arch.groups, rng),
            out_conv,
            subject_table,
            action_table,
            null_embedding,
            adapter_spec: None,
            arch,
        })
    }

    /// Learned embedding for a (subject, action) code; None maps to the
    /// dedicated unconditional vector.
    pub fn embed_condition(&self, code: Option<(usize, usize)>) -> Result<ConditionEmbedding> {
        match code {
            None => Ok(ConditionEmbedding {
                vector: self.null_embedding.clone(),
                code: None,
            }),
            Some((s, a)) => {
                if s >= self.arch.n_subjects {
                    return Err(Error::Vocabulary {
                        kind: "subject",
                        id: s,
                        len: self.arch.n_subjects,
                    });
                }
                if a >= self.arch.n_actions {
                    return Err(Error::Vocabulary {
                        kind: "action",
                        id: a,
                        len: self.arch.n_actions,
                    });
                }
                let mut vector = Array1::zeros(self.arch.cond_dim);
                let half = self.arch.cond_dim / 2;
                vector
                    .slice_mut(ndarray::s![..half])
                    .assign(&self.subject_table.row(s));
                vector
                    .slice_mut(ndarray::s![half..])
                    .assign(&self.action_table.row(a));
                Ok(ConditionEmbedding {
                    vector,
                    code: Some((s, a)),
                })
            }
        }
    }

    fn check_input(&self, x: &ImageTensor) -> Result<()> {
        let want = (self.arch.in_channels, self.arch.height, self.arch.width);
        if x.shape() != want {
            return Err(Error::ShapeMismatch {
                expected: format!("{want:?}"),
                got: format!("{:?}", x.shape()),
            });
        }
        Ok(())
    }

    /// Forward pass recording everything backward needs.
    pub fn forward_with_tape(
        &self,
        x_t: &ImageTensor,
        t: usize,
        cond: &ConditionEmbedding,
    ) -> Result<(ImageTensor, Tape)> {
        self.check_input(x_t)?;
        if cond.vector.len() != self.arch.cond_dim {
            return Err(Error::ShapeMismatch {
                expected: format!("cond dim {}", self.arch.cond_dim),
                got: format!("{}", cond.vector.len()),
            });
        }
        let sin_t = sinusoidal_embedding(t, self.arch.sin_dim);
        let tl1_pre = self.time_lin1.forward(&sin_t);
        let tl1_act = tl1_pre.mapv(silu);
        let e_pre = self.time_lin2.forward(&tl1_act) + self.cond_lin.forward(&cond.vector);
        let e = e_pre.mapv(silu);

        let x = &x_t.data;
        let (h0, c_enc0) = self.enc0.forward(x, &e);
        let (h1, c_down1) = self.down1.forward(&h0, &e);
        let (h2, c_down2) = self.down2.forward(&h1, &e);
        let (h3, c_mid) = self.mid.forward(&h2, &e);
        let u1 = upsample2(&self.up1_reduce.forward(&h3));
        let s1 = &u1 + &h1;
        let (h4, c_dec1) = self.dec1.forward(&s1, &e);
        let u2 = upsample2(&self.up2_reduce.forward(&h4));
        let s2 = &u2 + &h0;
        let (h5, c_dec0) = self.dec0.forward(&s2, &e);
        let y = self.out_conv.forward(&h5);

        Ok((
            ImageTensor::new(y),
            Tape {
                code: cond.code,
                cond_vector: cond.vector.clone(),
                sin_t,
                tl1_pre,
                tl1_act,
                e_pre,
                e,
                c_enc0,
                c_down1,
                c_down2,
                c_mid,
                h3,
                c_dec1,
                h4,
                c_dec0,
                h5,
            },
        ))
    }

    /// Backpropagates an output gradient through the tape into a fresh
    /// gradient store (embedding tables included via the recorded code).
    pub fn backward(&self, tape: &Tape, dout: &ImageTensor) -> GradStore {
        let mut g = GradStore::new();
        let e = &tape.e;

        let dh5 = self.out_conv.backward(&tape.h5, &dout.data, "out_conv", &mut g);
        let (ds2, de0) = self.dec0.backward(&tape.c_dec0, e, &dh5, "dec0", &mut g);
        // s2 = upsample(up2_reduce(h4)) + h0
        let dh4 = self.up2_reduce.backward(
            &tape.h4,
            &upsample2_backward(&ds2),
            "up2_reduce",
            &mut g,
        );
        let (ds1, de1) = self.dec1.backward(&tape.c_dec1, e, &dh4, "dec1", &mut g);
        // s1 = upsample(up1_reduce(h3)) + h1
        let dh3 = self.up1_reduce.backward(
            &tape.h3,
            &upsample2_backward(&ds1),
            "up1_reduce",
            &mut g,
        );
        let (dh2, de2) = self.mid.backward(&tape.c_mid, e, &dh3, "mid", &mut g);
        let (dh1_main, de3) = self.down2.backward(&tape.c_down2, e, &dh2, "down2", &mut g);
        let dh1 = &dh1_main + &ds1; // skip connection into s1
        let (dh0_main, de4) = self.down1.backward(&tape.c_down1, e, &dh1, "down1", &mut g);
        let dh0 = &dh0_main + &ds2; // skip connection into s2
        let (_dx, de5) = self.enc0.backward(&tape.c_enc0, e, &dh0, "enc0", &mut g);

        // Embedding path: e = silu(time_lin2(silu(time_lin1(sin_t))) + cond_lin(cond)).
        let mut de = de0 + de1 + de2 + de3 + de4 + de5;
        ndarray::Zip::from(&mut de)
            .and(&tape.e_pre)
            .for_each(|d, &p| *d *= silu_prime(p));
        let dcond_vec = self.cond_lin.backward(&tape.cond_vector, &de, "cond_lin", &mut g);
        let mut dtl1_act = self.time_lin2.backward(&tape.tl1_act, &de, "time_lin2", &mut g);
        ndarray::Zip::from(&mut dtl1_act)
            .and(&tape.tl1_pre)
            .for_each(|d, &p| *d *= silu_prime(p));
        let _ = self.time_lin1.backward(&tape.sin_t, &dtl1_act, "time_lin1", &mut g);

        // Route the condition-vector gradient into the tables.
        let half = self.arch.cond_dim / 2;
        match tape.code {
            None => {
                g.accumulate("embed.null", dcond_vec.as_slice().expect("contiguous"));
            }
            Some((s, a)) => {
                let mut dsub = vec![0.0; self.subject_table.len()];
                let mut dact = vec![0.0; self.action_table.len()];
                for i in 0..half {
                    dsub[s * half + i] = dcond_vec[i];
                    dact[a * half + i] = dcond_vec[half + i];
                }
                g.accumulate("embed.subject", &dsub);
                g.accumulate("embed.action", &dact);
            }
        }
        g
    }

    /// Walks every named parameter immutably, in a fixed order.
    pub fn for_each_param(&self, f: &mut dyn FnMut(&str, &[f64])) {
        let visit_linear = |name: &str, l: &Linear, f: &mut dyn FnMut(&str, &[f64])| {
            f(&format!("{name}.w"), l.w.as_slice().expect("contiguous"));
            f(&format!("{name}.b"), l.b.as_slice().expect("contiguous"));
            if let Some(ad) = &l.adapter {
                f(&format!("{name}.lora_a"), ad.a.as_slice().expect("contiguous"));
                f(&format!("{name}.lora_b"), ad.b.as_slice().expect("contiguous"));
            }
        };
        let visit_conv = |name: &str, c: &Conv2d, f: &mut dyn FnMut(&str, &[f64])| {
            f(&format!("{name}.w"), c.w.as_slice().expect("contiguous"));
            f(&format!("{name}.b"), c.b.as_slice().expect("contiguous"));
            if let Some(ad) = &c.adapter {
                f(&format!("{name}.lora_a"), ad.a.as_slice().expect("contiguous"));
                f(&format!("{name}.lora_b"), ad.b.as_slice().expect("contiguous"));
            }
        };
        let visit_block = |name: &str, b: &ConvBlock, f: &mut dyn FnMut(&str, &[f64])| {
            visit_conv(&format!("{name}.conv"), &b.conv, f);
            f(
                &format!("{name}.norm.gamma"),
                b.norm.gamma.as_slice().expect("contiguous"),
            );
            f(
                &format!("{name}.norm.beta"),
                b.norm.beta.as_slice().expect("contiguous"),
            );
            visit_linear(&format!("{name}.emb_proj"), &b.emb_proj, f);
        };

        f("embed.subject", self.subject_table.as_slice().expect("contiguous"));
        f("embed.action", self.action_table.as_slice().expect("contiguous"));
        f("embed.null", self.null_embedding.as_slice().expect("contiguous"));
        visit_linear("time_lin1", &self.time_lin1, f);
        visit_linear("time_lin2", &self.time_lin2, f);
        visit_linear("cond_lin", &self.cond_lin, f);
        visit_block("enc0", &self.enc0, f);
        visit_block("down1", &self.down1, f);
        visit_block("down2", &self.down2, f);
        visit_block("mid", &self.mid, f);
        visit_conv("up1_reduce", &self.up1_reduce, f);
        visit_block("dec1", &self.dec1, f);
        visit_conv("up2_reduce", &self.up2_reduce, f);
        visit_block("dec0", &self.dec0, f);
        visit_conv("out_conv", &self.out_conv, f);
    }

    /// Walks every named parameter mutably, in the same order as
    /// [`for_each_param`].
    pub fn for_each_param_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        fn visit_linear(name: &str, l: &mut Linear, f: &mut dyn FnMut(&str, &mut [f64])) {
            f(&format!("{name}.w"), l.w.as_slice_mut().expect("contiguous"));
            f(&format!("{name}.b"), l.b.as_slice_mut().expect("contiguous"));
            if let Some(ad) = &mut l.adapter {
                f(&format!("{name}.lora_a"), ad.a.as_slice_mut().expect("contiguous"));
                f(&format!("{name}.lora_b"), ad.b.as_slice_mut().expect("contiguous"));
            }
        }
        fn visit_conv(name: &str, c: &mut Conv2d, f: &mut dyn FnMut(&str, &mut [f64])) {
            f(&format!("{name}.w"), c.w.as_slice_mut().expect("contiguous"));
            f(&format!("{name}.b"), c.b.as_slice_mut().expect("contiguous"));
            if let Some(ad) = &mut c.adapter {
                f(&format!("{name}.lora_a"), ad.a.as_slice_mut().expect("contiguous"));
                f(&format!("{name}.lora_b"), ad.b.as_slice_mut().expect("contiguous"));
            }
        }
        fn visit_block(name: &str, b: &mut ConvBlock, f: &mut dyn FnMut(&str, &mut [f64])) {
            visit_conv(&format!("{name}.conv"), &mut b.conv, f);
            f(
                &format!("{name}.norm.gamma"),
                b.norm.gamma.as_slice_mut().expect("contiguous"),
            );
            f(
                &format!("{name}.norm.beta"),
                b.norm.beta.as_slice_mut().expect("contiguous"),
            );
            visit_linear(&format!("{name}.emb_proj"), &mut b.emb_proj, f);
        }

        f(
            "embed.subject",
            self.subject_table.as_slice_mut().expect("contiguous"),
        );
        f(
            "embed.action",
            self.action_table.as_slice_mut().expect("contiguous"),
        );
        f(
            "embed.null",
            self.null_embedding.as_slice_mut().expect("contiguous"),
        );
        visit_linear("time_lin1", &mut self.time_lin1, f);
        visit_linear("time_lin2", &mut self.time_lin2, f);
        visit_linear("cond_lin", &mut self.cond_lin, f);
        visit_block("enc0", &mut self.enc0, f);
        visit_block("down1", &mut self.down1, f);
        visit_block("down2", &mut self.down2, f);
        visit_block("mid", &mut self.mid, f);
        visit_conv("up1_reduce", &mut self.up1_reduce, f);
        visit_block("dec1", &mut self.dec1, f);
        visit_conv("up2_reduce", &mut self.up2_reduce, f);
        visit_block("dec0", &mut self.dec0, f);
        visit_conv("out_conv", &mut self.out_conv, f);
    }

    /// Checksum over base (non-adapter) parameters; useful for frozen-base
    /// assertions.
    pub fn base_param_checksum(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64; // FNV offset basis
        self.for_each_param(&mut |name, values| {
            if name.contains(".lora_") {
                return;
            }
            for b in name.bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x1000_0000_01b3);
            }
            for v in values {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x1000_0000_01b3);
            }
        });
        h
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |_, v| n += v.len());
        n
    }

    fn layer_dims(&self, target: &str) -> Option<(usize, usize)> {
        let lin = |l: &Linear| (l.w.nrows(), l.w.ncols());
        let conv = |c: &Conv2d| (c.w.nrows(), c.w.ncols());
        match target {
            "time_lin1" => Some(lin(&self.time_lin1)),
            "time_lin2" => Some(lin(&self.time_lin2)),
            "cond_lin" => Some(lin(&self.cond_lin)),
            "enc0.conv" => Some(conv(&self.enc0.conv)),
            "down1.conv" => Some(conv(&self.down1.conv)),
            "down2.conv" => Some(conv(&self.down2.conv)),
            "mid.conv" => Some(conv(&self.mid.conv)),
            "up1_reduce" => Some(conv(&self.up1_reduce)),
            "dec1.conv" => Some(conv(&self.dec1.conv)),
            "up2_reduce" => Some(conv(&self.up2_reduce)),
            "dec0.conv" => Some(conv(&self.dec0.conv)),
            "out_conv" => Some(conv(&self.out_conv)),
            _ => None,
        }
    }

    fn adapter_slot(&mut self, target: &str) -> Option<&mut Option<LoraAdapter>> {
        match target {
            "time_lin1" => Some(&mut self.time_lin1.adapter),
            "time_lin2" => Some(&mut self.time_lin2.adapter),
            "cond_lin" => Some(&mut self.cond_lin.adapter),
            "enc0.conv" => Some(&mut self.enc0.conv.adapter),
            "down1.conv" => Some(&mut self.down1.conv.adapter),
            "down2.conv" => Some(&mut self.down2.conv.adapter),
            "mid.conv" => Some(&mut self.mid.conv.adapter),
            "up1_reduce" => Some(&mut self.up1_reduce.adapter),
            "dec1.conv" => Some(&mut self.dec1.conv.adapter),
            "up2_reduce" => Some(&mut self.up2_reduce.adapter),
            "dec0.conv" => Some(&mut self.dec0.conv.adapter),
            "out_conv" => Some(&mut self.out_conv.adapter),
            _ => None,
        }
    }

    /// Effective rank for a layer: requested rank clamped to half the
    /// smaller weight dimension, never below 1.
    pub fn effective_rank(rank: usize, out_dim: usize, in_dim: usize) -> usize {
        rank.min((out_dim.min(in_dim) / 2).max(1))
    }

    pub fn has_adapters(&self) -> bool {
        self.adapter_spec.is_some()
    }

    /// Number of parameters adapters would add; `sum r * (in + out)` over
    /// the target layers.
    pub fn adapter_param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_param(&mut |name, v| {
            if name.contains(".lora_") {
                n += v.len();
            }
        });
        n
    }
}

/// Attaches zero-initialized low-rank adapters to the named layers. The
/// model's input-output map is unchanged until the adapters train.
pub fn attach_adapters(
    model: &mut DenoiserModel,
    rank: usize,
    targets: &[String],
    rng: &mut ChaCha8Rng,
) -> Result<()> {
    if model.has_adapters() {
        return Err(Error::AdaptersAlreadyAttached);
    }
    if rank == 0 {
        return Err(Error::Config("adapter rank must be >= 1".into()));
    }
    for t in targets {
        if model.layer_dims(t).is_none() {
            return Err(Error::Config(format!("unknown adapter target {t:?}")));
        }
    }
    for t in targets {
        let (out_dim, in_dim) = model.layer_dims(t).expect("validated above");
        let r = DenoiserModel::effective_rank(rank, out_dim, in_dim);
        let adapter = LoraAdapter::new(out_dim, in_dim, r, rng);
        *model.adapter_slot(t).expect("validated above") = Some(adapter);
    }
    model.adapter_spec = Some(AdapterSpec {
        rank,
        targets: targets.to_vec(),
    });
    Ok(())
}

/// Folds every adapter delta into its base weight and removes the adapters.
pub fn merge_adapters(model: &mut DenoiserModel) -> Result<()> {
    if !model.has_adapters() {
        return Err(Error::NoAdapters);
    }
    let spec = model.adapter_spec.clone().expect("checked above");
    for t in &spec.targets {
        let slot = model.adapter_slot(t).expect("spec targets are valid");
        if let Some(ad) = slot.take() {
            let delta = ad.delta();
            match t.as_str() {
                "time_lin1" => model.time_lin1.w += &delta,
                "time_lin2" => model.time_lin2.w += &delta,
                "cond_lin" => model.cond_lin.w += &delta,
                "enc0.conv" => model.enc0.conv.w += &delta,
                "down1.conv" => model.down1.conv.w += &delta,
                "down2.conv" => model.down2.conv.w += &delta,
                "mid.conv" => model.mid.conv.w += &delta,
                "up1_reduce" => model.up1_reduce.w += &delta,
                "dec1.conv" => model.dec1.conv.w += &delta,
                "up2_reduce" => model.up2_reduce.w += &delta,
                "dec0.conv" => model.dec0.conv.w += &delta,
                "out_conv" => model.out_conv.w += &delta,
                other => unreachable!("unknown target {other}"),
            }
        }
    }
    model.adapter_spec = None;
    Ok(())
}

impl NoisePredictor for DenoiserModel {
    fn predict_noise(
        &self,
        x_t: &ImageTensor,
        t: usize,
        cond: &ConditionEmbedding,
    ) -> Result<ImageTensor> {
        Ok(self.forward_with_tape(x_t, t, cond)?.0)
    }
}
