//! Checkpoint persistence: a single binary file framed as the 8-byte magic
//! `STGANCKP`, a little-endian `u32` format version, a `u64` payload length,
//! and the payload. The payload encodes every field in a fixed order with
//! little-endian primitives, so save → load → save is byte-identical.

use std::path::Path;

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::data::ScaleParams;
use crate::opt::AdamState;
use crate::predictor::{LayerParams, PredictorConfig, PredictorState};
use crate::spatial::WeightNormalization;
use crate::stgan::{
    DiscriminatorParams, GanConfig, GanState, GcnParams, GeneratorParams, LstmParams,
};

use super::{
    JointLosses, PreparedData, SplitFractions, TrainConfig, TrainError, TrainOptions,
    TrainingMode,
};

const MAGIC: &[u8; 8] = b"STGANCKP";
pub const FORMAT_VERSION: u32 = 1;

/// Loss curves of a training run.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LossHistory {
    pub pretrain: Vec<f64>,
    pub joint: Vec<JointLosses>,
    pub finetune: Vec<f64>,
}

/// Last observed losses and validation score.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MetricSnapshot {
    pub pretrain_final_loss: f64,
    pub best_val_mape: Option<f64>,
    pub last_d_loss: f64,
    pub last_g_loss: f64,
    pub last_pred_loss: f64,
}

/// Everything needed to evaluate or to resume training exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub mode: TrainingMode,
    pub q: usize,
    pub p: usize,
    pub regions: Vec<String>,
    pub normalization: WeightNormalization,
    pub fractions: SplitFractions,
    pub scale: ScaleParams,
    pub gan: GanState,
    pub predictor: PredictorState,
    pub opt_t: AdamState,
    pub train_config: TrainConfig,
    pub iter: u64,
    pub rng_seed: [u8; 32],
    pub rng_word_pos: u128,
    pub loss_history: LossHistory,
    pub metrics: MetricSnapshot,
}

impl Checkpoint {
    #[allow(clippy::too_many_arguments)]
    pub(super) fn capture(
        prepared: &PreparedData,
        opts: &TrainOptions,
        gan: &GanState,
        pred: &PredictorState,
        opt_t: &AdamState,
        rng: &ChaCha20Rng,
        history: &LossHistory,
        metrics: &MetricSnapshot,
        iter: u64,
    ) -> Checkpoint {
        Checkpoint {
            mode: opts.mode,
            q: prepared.q,
            p: prepared.p,
            regions: prepared.regions.clone(),
            normalization: opts.normalization,
            fractions: opts.fractions,
            scale: prepared.scale.clone(),
            gan: gan.clone(),
            predictor: pred.clone(),
            opt_t: opt_t.clone(),
            train_config: opts.train.clone(),
            iter,
            rng_seed: rng.get_seed(),
            rng_word_pos: rng.get_word_pos(),
            loss_history: history.clone(),
            metrics: *metrics,
        }
    }

    pub(super) fn restore_rng(&self) -> ChaCha20Rng {
        let mut rng = ChaCha20Rng::from_seed(self.rng_seed);
        rng.set_word_pos(self.rng_word_pos);
        rng
    }

    /// A resumed run must describe the same data and training setup.
    /// `max_iters` and the checkpoint interval may differ (that is how a
    /// run is extended); everything else must match.
    pub(super) fn check_compatible(
        &self,
        prepared: &PreparedData,
        opts: &TrainOptions,
    ) -> Result<(), TrainError> {
        if self.q != prepared.q || self.p != prepared.p {
            return Err(TrainError::IncompatibleCheckpoint(format!(
                "window (q={}, p={}) vs requested (q={}, p={})",
                self.q, self.p, prepared.q, prepared.p
            )));
        }
        if self.regions != prepared.regions {
            return Err(TrainError::IncompatibleCheckpoint(
                "region names differ from the panel".into(),
            ));
        }
        if self.mode != opts.mode {
            return Err(TrainError::IncompatibleCheckpoint(
                "training mode differs".into(),
            ));
        }
        if self.gan.config != opts.gan || self.predictor.config != opts.predictor {
            return Err(TrainError::IncompatibleCheckpoint(
                "network configuration differs".into(),
            ));
        }
        let mut a = self.train_config.clone();
        let mut b = opts.train.clone();
        a.max_iters = 0;
        b.max_iters = 0;
        a.checkpoint_interval = 0;
        b.checkpoint_interval = 0;
        if a != b {
            return Err(TrainError::IncompatibleCheckpoint(
                "training configuration differs".into(),
            ));
        }
        if self.iter > opts.train.max_iters {
            return Err(TrainError::IncompatibleCheckpoint(format!(
                "checkpoint is at iteration {} beyond max_iters {}",
                self.iter, opts.train.max_iters
            )));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.enum_tag(match self.mode {
            TrainingMode::Joint => 0,
            TrainingMode::NoJoint => 1,
        });
        w.u64(self.q as u64);
        w.u64(self.p as u64);
        w.u64(self.regions.len() as u64);
        for r in &self.regions {
            w.string(r);
        }
        w.enum_tag(match self.normalization {
            WeightNormalization::AffineRow => 0,
            WeightNormalization::AbsRow => 1,
            WeightNormalization::SymmetricDegree => 2,
        });
        w.f64(self.fractions.train);
        w.f64(self.fractions.val);
        w.f64(self.fractions.test);
        w.scale(&self.scale);
        w.gan(&self.gan);
        w.predictor(&self.predictor);
        w.adam(&self.opt_t);
        w.train_config(&self.train_config);
        w.u64(self.iter);
        w.bytes.extend_from_slice(&self.rng_seed);
        w.bytes.extend_from_slice(&self.rng_word_pos.to_le_bytes());
        w.u64(self.loss_history.pretrain.len() as u64);
        for &v in &self.loss_history.pretrain {
            w.f64(v);
        }
        w.u64(self.loss_history.joint.len() as u64);
        for j in &self.loss_history.joint {
            w.f64(j.d_total);
            w.f64(j.d_wasserstein);
            w.f64(j.gp);
            w.f64(j.g_adv);
            w.f64(j.pred_mse);
            w.f64(j.g_total);
        }
        w.u64(self.loss_history.finetune.len() as u64);
        for &v in &self.loss_history.finetune {
            w.f64(v);
        }
        w.f64(self.metrics.pretrain_final_loss);
        w.option_f64(self.metrics.best_val_mape);
        w.f64(self.metrics.last_d_loss);
        w.f64(self.metrics.last_g_loss);
        w.f64(self.metrics.last_pred_loss);
        w.bytes
    }

    pub fn from_bytes(payload: &[u8]) -> Result<Checkpoint, TrainError> {
        let mut r = Reader {
            bytes: payload,
            pos: 0,
        };
        let mode = match r.enum_tag()? {
            0 => TrainingMode::Joint,
            1 => TrainingMode::NoJoint,
            t => return Err(corrupt(format!("unknown mode tag {t}"))),
        };
        let q = r.u64()? as usize;
        let p = r.u64()? as usize;
        let n_regions = r.u64()? as usize;
        let mut regions = Vec::with_capacity(n_regions);
        for _ in 0..n_regions {
            regions.push(r.string()?);
        }
        let normalization = match r.enum_tag()? {
            0 => WeightNormalization::AffineRow,
            1 => WeightNormalization::AbsRow,
            2 => WeightNormalization::SymmetricDegree,
            t => return Err(corrupt(format!("unknown normalization tag {t}"))),
        };
        let fractions = SplitFractions {
            train: r.f64()?,
            val: r.f64()?,
            test: r.f64()?,
        };
        let scale = r.scale()?;
        let gan = r.gan()?;
        let predictor = r.predictor()?;
        let opt_t = r.adam()?;
        let train_config = r.train_config()?;
        let iter = r.u64()?;
        let mut rng_seed = [0u8; 32];
        rng_seed.copy_from_slice(r.take(32)?);
        let mut pos_bytes = [0u8; 16];
        pos_bytes.copy_from_slice(r.take(16)?);
        let rng_word_pos = u128::from_le_bytes(pos_bytes);
        let n_pre = r.u64()? as usize;
        let mut pretrain = Vec::with_capacity(n_pre);
        for _ in 0..n_pre {
            pretrain.push(r.f64()?);
        }
        let n_joint = r.u64()? as usize;
        let mut joint = Vec::with_capacity(n_joint);
        for _ in 0..n_joint {
            joint.push(JointLosses {
                d_total: r.f64()?,
                d_wasserstein: r.f64()?,
                gp: r.f64()?,
                g_adv: r.f64()?,
                pred_mse: r.f64()?,
                g_total: r.f64()?,
            });
        }
        let n_ft = r.u64()? as usize;
        let mut finetune = Vec::with_capacity(n_ft);
        for _ in 0..n_ft {
            finetune.push(r.f64()?);
        }
        let metrics = MetricSnapshot {
            pretrain_final_loss: r.f64()?,
            best_val_mape: r.option_f64()?,
            last_d_loss: r.f64()?,
            last_g_loss: r.f64()?,
            last_pred_loss: r.f64()?,
        };
        if r.pos != r.bytes.len() {
            return Err(corrupt(format!(
                "{} trailing bytes after payload",
                r.bytes.len() - r.pos
            )));
        }
        Ok(Checkpoint {
            mode,
            q,
            p,
            regions,
            normalization,
            fractions,
            scale,
            gan,
            predictor,
            opt_t,
            train_config,
            iter,
            rng_seed,
            rng_word_pos,
            loss_history: LossHistory {
                pretrain,
                joint,
                finetune,
            },
            metrics,
        })
    }
}

/// Write a checkpoint file (magic, version, length, payload).
pub fn save_checkpoint(cp: &Checkpoint, path: &Path) -> Result<(), TrainError> {
    let payload = cp.to_bytes();
    let mut out = Vec::with_capacity(payload.len() + 20);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    std::fs::write(path, out)?;
    Ok(())
}

/// Read a checkpoint file, validating magic, version, and length.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let data = std::fs::read(path)?;
    if data.len() < 20 || &data[..8] != MAGIC {
        return Err(corrupt("missing STGANCKP magic".into()));
    }
    let version = u32::from_le_bytes(data[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(TrainError::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let len = u64::from_le_bytes(data[12..20].try_into().expect("8 bytes")) as usize;
    if data.len() != 20 + len {
        return Err(corrupt(format!(
            "payload length {} does not match header {len}",
            data.len() - 20
        )));
    }
    Checkpoint::from_bytes(&data[20..])
}

fn corrupt(msg: String) -> TrainError {
    TrainError::CorruptCheckpoint(msg)
}

#[derive(Default)]
struct Writer {
    bytes: Vec<u8>,
}

impl Writer {
    fn u64(&mut self, v: u64) {
        self.bytes.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes.extend_from_slice(&v.to_bits().to_le_bytes());
    }
    fn bool(&mut self, v: bool) {
        self.bytes.push(v as u8);
    }
    fn enum_tag(&mut self, t: u8) {
        self.bytes.push(t);
    }
    fn string(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.bytes.extend_from_slice(s.as_bytes());
    }
    fn array(&mut self, a: &Array2<f64>) {
        let (r, c) = a.dim();
        self.u64(r as u64);
        self.u64(c as u64);
        for v in a.iter() {
            self.f64(*v);
        }
    }
    fn arrays(&mut self, list: &[&Array2<f64>]) {
        self.u64(list.len() as u64);
        for a in list {
            self.array(a);
        }
    }
    fn option_f64(&mut self, v: Option<f64>) {
        match v {
            Some(x) => {
                self.bytes.push(1);
                self.f64(x);
            }
            None => self.bytes.push(0),
        }
    }
    fn scale(&mut self, s: &ScaleParams) {
        self.u64(s.shift.len() as u64);
        for &v in &s.shift {
            self.f64(v);
        }
        for &v in &s.scale {
            self.f64(v);
        }
        for &v in &s.constant {
            self.bool(v);
        }
    }
    fn adam(&mut self, a: &AdamState) {
        let m: Vec<&Array2<f64>> = a.m.iter().collect();
        self.arrays(&m);
        let v: Vec<&Array2<f64>> = a.v.iter().collect();
        self.arrays(&v);
        self.u64(a.t);
    }
    fn gan(&mut self, g: &GanState) {
        self.u64(g.config.f1 as u64);
        self.u64(g.config.f2 as u64);
        self.u64(g.config.hidden as u64);
        self.arrays(&g.generator.tensors());
        self.arrays(&g.discriminator.tensors());
        self.adam(&g.opt_g);
        self.adam(&g.opt_d);
        self.u64(g.iter);
        self.u64(g.seed);
    }
    fn predictor(&mut self, p: &PredictorState) {
        let c = &p.config;
        self.u64(c.d_model as u64);
        self.u64(c.n_heads as u64);
        self.u64(c.n_layers as u64);
        self.u64(c.d_ffn as u64);
        self.f64(c.dropout);
        self.u64(c.conv_kernel as u64);
        self.u64(c.horizon as u64);
        self.u64(c.window as u64);
        self.arrays(&p.tensors());
    }
    fn train_config(&mut self, c: &TrainConfig) {
        self.f64(c.lr_g);
        self.f64(c.lr_d);
        self.f64(c.lr_t);
        self.u64(c.batch_size as u64);
        self.u64(c.max_iters);
        self.u64(c.pretrain_epochs as u64);
        self.u64(c.n_critic as u64);
        self.f64(c.lambda_gp);
        self.f64(c.lambda_gan);
        self.f64(c.lambda_pred);
        self.u64(c.seed);
        self.u64(c.warmup_iters);
        self.f64(c.virtual_mix);
        self.option_f64(c.joint_lr_t);
        match c.early_stop_patience {
            Some(p) => {
                self.bytes.push(1);
                self.u64(p as u64);
            }
            None => self.bytes.push(0),
        }
        self.u64(c.eval_interval as u64);
        self.u64(c.checkpoint_interval);
        self.bool(c.freeze_generator);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TrainError> {
        if self.pos + n > self.bytes.len() {
            return Err(corrupt(format!(
                "unexpected end of payload at byte {}",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u64(&mut self) -> Result<u64, TrainError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }
    fn f64(&mut self) -> Result<f64, TrainError> {
        Ok(f64::from_bits(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8"),
        )))
    }
    fn bool(&mut self) -> Result<bool, TrainError> {
        Ok(self.take(1)?[0] != 0)
    }
    fn enum_tag(&mut self) -> Result<u8, TrainError> {
        Ok(self.take(1)?[0])
    }
    fn string(&mut self) -> Result<String, TrainError> {
        let n = self.u64()? as usize;
        let b = self.take(n)?;
        String::from_utf8(b.to_vec()).map_err(|_| corrupt("invalid UTF-8 string".into()))
    }
    fn array(&mut self) -> Result<Array2<f64>, TrainError> {
        let r = self.u64()? as usize;
        let c = self.u64()? as usize;
        if r.checked_mul(c).is_none() || r * c > (1 << 32) {
            return Err(corrupt(format!("implausible array shape {r}×{c}")));
        }
        let mut data = Vec::with_capacity(r * c);
        for _ in 0..r * c {
            data.push(self.f64()?);
        }
        Array2::from_shape_vec((r, c), data).map_err(|e| corrupt(format!("array shape: {e}")))
    }
    fn arrays(&mut self) -> Result<Vec<Array2<f64>>, TrainError> {
        let n = self.u64()? as usize;
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            out.push(self.array()?);
        }
        Ok(out)
    }
    fn arrays_exact(&mut self, expect: usize, what: &str) -> Result<Vec<Array2<f64>>, TrainError> {
        let list = self.arrays()?;
        if list.len() != expect {
            return Err(corrupt(format!(
                "{what}: expected {expect} tensors, found {}",
                list.len()
            )));
        }
        Ok(list)
    }
    fn option_f64(&mut self) -> Result<Option<f64>, TrainError> {
        Ok(match self.take(1)?[0] {
            0 => None,
            _ => Some(self.f64()?),
        })
    }
    fn scale(&mut self) -> Result<ScaleParams, TrainError> {
        let n = self.u64()? as usize;
        let mut shift = Vec::with_capacity(n);
        for _ in 0..n {
            shift.push(self.f64()?);
        }
        let mut scale = Vec::with_capacity(n);
        for _ in 0..n {
            scale.push(self.f64()?);
        }
        let mut constant = Vec::with_capacity(n);
        for _ in 0..n {
            constant.push(self.bool()?);
        }
        Ok(ScaleParams {
            shift,
            scale,
            constant,
        })
    }
    fn adam(&mut self) -> Result<AdamState, TrainError> {
        let m = self.arrays()?;
        let v = self.arrays()?;
        if m.len() != v.len() {
            return Err(corrupt("adam moment lists differ in length".into()));
        }
        let t = self.u64()?;
        Ok(AdamState { m, v, t })
    }
    fn lstm(list: &mut std::vec::IntoIter<Array2<f64>>) -> LstmParams {
        LstmParams {
            w_xi: list.next().expect("w_xi"),
            w_xf: list.next().expect("w_xf"),
            w_xo: list.next().expect("w_xo"),
            w_xc: list.next().expect("w_xc"),
            w_hi: list.next().expect("w_hi"),
            w_hf: list.next().expect("w_hf"),
            w_ho: list.next().expect("w_ho"),
            w_hc: list.next().expect("w_hc"),
            b_i: list.next().expect("b_i"),
            b_f: list.next().expect("b_f"),
            b_o: list.next().expect("b_o"),
            b_c: list.next().expect("b_c"),
        }
    }
    fn gan(&mut self) -> Result<GanState, TrainError> {
        let config = GanConfig {
            f1: self.u64()? as usize,
            f2: self.u64()? as usize,
            hidden: self.u64()? as usize,
        };
        let gen_list = self.arrays_exact(16, "generator")?;
        let mut it = gen_list.into_iter();
        let generator = GeneratorParams {
            gcn: GcnParams {
                w0: it.next().expect("w0"),
                w1: it.next().expect("w1"),
            },
            lstm: Self::lstm(&mut it),
            w_g: it.next().expect("w_g"),
            b_g: it.next().expect("b_g"),
        };
        let disc_list = self.arrays_exact(16, "discriminator")?;
        let mut it = disc_list.into_iter();
        let discriminator = DiscriminatorParams {
            gcn: GcnParams {
                w0: it.next().expect("w0"),
                w1: it.next().expect("w1"),
            },
            lstm: Self::lstm(&mut it),
            w_score: it.next().expect("w_score"),
            b_score: it.next().expect("b_score"),
        };
        let opt_g = self.adam()?;
        let opt_d = self.adam()?;
        let iter = self.u64()?;
        let seed = self.u64()?;
        Ok(GanState {
            config,
            generator,
            discriminator,
            opt_g,
            opt_d,
            iter,
            seed,
        })
    }
    fn predictor(&mut self) -> Result<PredictorState, TrainError> {
        let config = PredictorConfig {
            d_model: self.u64()? as usize,
            n_heads: self.u64()? as usize,
            n_layers: self.u64()? as usize,
            d_ffn: self.u64()? as usize,
            dropout: self.f64()?,
            conv_kernel: self.u64()? as usize,
            horizon: self.u64()? as usize,
            window: self.u64()? as usize,
        };
        let expected = 2 + config.conv_kernel + 12 * config.n_layers + 6;
        let list = self.arrays_exact(expected, "predictor")?;
        let mut it = list.into_iter();
        let w_e = it.next().expect("w_e");
        let b_e = it.next().expect("b_e");
        let conv: Vec<Array2<f64>> = (0..config.conv_kernel)
            .map(|_| it.next().expect("conv tap"))
            .collect();
        let mut layers = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            layers.push(LayerParams {
                w_q: it.next().expect("w_q"),
                w_k: it.next().expect("w_k"),
                w_v: it.next().expect("w_v"),
                w_o: it.next().expect("w_o"),
                ln1_gamma: it.next().expect("ln1_gamma"),
                ln1_beta: it.next().expect("ln1_beta"),
                w_1: it.next().expect("w_1"),
                b_1: it.next().expect("b_1"),
                w_2: it.next().expect("w_2"),
                b_2: it.next().expect("b_2"),
                ln2_gamma: it.next().expect("ln2_gamma"),
                ln2_beta: it.next().expect("ln2_beta"),
            });
        }
        Ok(PredictorState {
            config,
            w_e,
            b_e,
            conv,
            layers,
            head_w1: it.next().expect("head_w1"),
            head_b1: it.next().expect("head_b1"),
            head_w2: it.next().expect("head_w2"),
            head_b2: it.next().expect("head_b2"),
            w_out: it.next().expect("w_out"),
            b_out: it.next().expect("b_out"),
        })
    }
    fn train_config(&mut self) -> Result<TrainConfig, TrainError> {
        Ok(TrainConfig {
            lr_g: self.f64()?,
            lr_d: self.f64()?,
            lr_t: self.f64()?,
            batch_size: self.u64()? as usize,
            max_iters: self.u64()?,
            pretrain_epochs: self.u64()? as usize,
            n_critic: self.u64()? as usize,
            lambda_gp: self.f64()?,
            lambda_gan: self.f64()?,
            lambda_pred: self.f64()?,
            seed: self.u64()?,
            warmup_iters: self.u64()?,
            virtual_mix: self.f64()?,
            joint_lr_t: self.option_f64()?,
            early_stop_patience: match self.take(1)?[0] {
                0 => None,
                _ => Some(self.u64()? as usize),
            },
            eval_interval: self.u64()? as usize,
            checkpoint_interval: self.u64()?,
            freeze_generator: self.bool()?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn sample_checkpoint() -> Checkpoint {
        let gan = GanState::init(
            GanConfig {
                f1: 3,
                f2: 4,
                hidden: 5,
            },
            7,
        );
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let pred = PredictorState::init(
            PredictorConfig {
                d_model: 8,
                n_heads: 2,
                n_layers: 1,
                d_ffn: 16,
                dropout: 0.0,
                conv_kernel: 3,
                horizon: 2,
                window: 6,
            },
            &mut rng,
        )
        .unwrap();
        let opt_t = AdamState::for_tensors(&pred.tensors());
        let mut train_rng = ChaCha20Rng::seed_from_u64(1);
        let _ = rand::Rng::random::<u64>(&mut train_rng);
        Checkpoint {
            mode: TrainingMode::Joint,
            q: 6,
            p: 2,
            regions: vec!["a".into(), "b".into(), "c".into()],
            normalization: WeightNormalization::AffineRow,
            fractions: SplitFractions::default(),
            scale: ScaleParams {
                shift: vec![0.0, 1.0, 2.0],
                scale: vec![1.0, 2.0, 1.0],
                constant: vec![false, false, true],
            },
            gan,
            predictor: pred,
            opt_t,
            train_config: TrainConfig::default(),
            iter: 42,
            rng_seed: train_rng.get_seed(),
            rng_word_pos: train_rng.get_word_pos(),
            loss_history: LossHistory {
                pretrain: vec![1.0, 0.5],
                joint: vec![JointLosses {
                    d_total: 0.1,
                    d_wasserstein: -0.2,
                    gp: 0.3,
                    g_adv: 0.4,
                    pred_mse: 0.5,
                    g_total: 0.9,
                }],
                finetune: vec![],
            },
            metrics: MetricSnapshot {
                pretrain_final_loss: 0.5,
                best_val_mape: Some(0.12),
                last_d_loss: 0.1,
                last_g_loss: 0.9,
                last_pred_loss: 0.5,
            },
        }
    }

    #[test]
    fn save_load_round_trip_is_bit_identical() {
        let cp = sample_checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&cp, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(cp, loaded);
        let path2 = dir.path().join("model2.ckpt");
        save_checkpoint(&loaded, &path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
        // RNG restore reproduces the same stream position.
        let mut restored = loaded.restore_rng();
        let mut original = cp.restore_rng();
        assert_eq!(
            rand::Rng::random::<u64>(&mut restored),
            rand::Rng::random::<u64>(&mut original)
        );
    }

    #[test]
    fn wrong_version_is_rejected() {
        let cp = sample_checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&cp, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8] = 99;
        std::fs::write(&path, bytes).unwrap();
        match load_checkpoint(&path) {
            Err(TrainError::VersionMismatch { found: 99, .. }) => {}
            other => panic!("expected VersionMismatch, got {other:?}"),
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let cp = sample_checkpoint();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&cp, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        match load_checkpoint(&path) {
            Err(TrainError::CorruptCheckpoint(_)) => {}
            other => panic!("expected CorruptCheckpoint, got {other:?}"),
        }
        std::fs::write(&path, b"NOTMAGIC").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(TrainError::CorruptCheckpoint(_))
        ));
    }
}
