//! Binary checkpoints: little-endian f64 buffers keyed by parameter name,
//! plus prototypes, per-task Fisher anchors, class assignments, and the
//! distillation snapshot. The encoding is bit-exact, so save → load → save
//! reproduces identical bytes. The replay buffer is deliberately not stored:
//! checkpoints serve evaluation and analysis, not mid-task resumption.

use crate::config::RunConfig;
use crate::encoder::Backbone;
use crate::error::HiclError;
use crate::model::HiclModel;
use crate::nn::Dense;
use crate::objectives::FisherInfo;
use crate::router::Prototype;
use crate::Result;
use std::path::Path;

const MAGIC: &[u8; 8] = b"HICLCKPT";
const VERSION: u32 = 1;

/// Everything a checkpoint stores, in plain-data form.
#[derive(Debug)]
pub struct CheckpointData {
    pub config: RunConfig,
    pub n_global_classes: usize,
    pub classes_per_task: usize,
    pub seen_tasks: usize,
    pub params: Vec<(String, Vec<f64>)>,
    pub prototypes: Vec<Prototype>,
    pub expert_classes: Vec<Vec<usize>>,
    pub fisher: Vec<FisherRecord>,
    pub snapshot: Option<Vec<(String, Vec<f64>)>>,
}

/// Fisher/anchor state for one finished task, in storable form.
#[derive(Debug)]
pub struct FisherRecord {
    pub task_id: usize,
    pub prototype: Vec<f64>,
    pub fisher: Vec<(String, Vec<f64>)>,
    pub anchor: Vec<(String, Vec<f64>)>,
}

/// A loaded checkpoint turned back into live objects.
pub struct RestoredState {
    pub config: RunConfig,
    pub model: HiclModel,
    pub fisher: Vec<FisherInfo>,
    pub snapshot: Option<Backbone>,
    pub seen_tasks: usize,
}

// ── encoding ─────────────────────────────────────────────────────────

struct Enc {
    buf: Vec<u8>,
}

impl Enc {
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for x in v {
            self.buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    fn str(&mut self, s: &str) {
        self.u64(s.len() as u64);
        self.buf.extend_from_slice(s.as_bytes());
    }
    fn named(&mut self, entries: &[(String, Vec<f64>)]) {
        self.u64(entries.len() as u64);
        for (name, data) in entries {
            self.str(name);
            self.f64s(data);
        }
    }
}

struct Dec<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Dec<'a> {
    fn fail(&self, what: &str) -> HiclError {
        HiclError::Checkpoint(format!(
            "{}: corrupt at byte {} while reading {what}",
            self.path, self.pos
        ))
    }
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.fail(what));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
    fn f64s(&mut self, what: &str) -> Result<Vec<f64>> {
        let n = self.u64(what)? as usize;
        let raw = self.take(n * 8, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
    fn str(&mut self, what: &str) -> Result<String> {
        let n = self.u64(what)? as usize;
        let raw = self.take(n, what)?;
        String::from_utf8(raw.to_vec()).map_err(|_| self.fail(what))
    }
    fn named(&mut self, what: &str) -> Result<Vec<(String, Vec<f64>)>> {
        let n = self.u64(what)? as usize;
        (0..n)
            .map(|_| Ok((self.str(what)?, self.f64s(what)?)))
            .collect()
    }
}

impl CheckpointData {
    /// Capture the live training state.
    pub fn capture(
        config: &RunConfig,
        model: &HiclModel,
        fisher: &[FisherInfo],
        snapshot: Option<&Backbone>,
        seen_tasks: usize,
        n_global_classes: usize,
        classes_per_task: usize,
    ) -> Self {
        let to_raw = |v: &[(String, crate::tensor::Tensor)]| {
            v.iter().map(|(n, t)| (n.clone(), t.to_vec())).collect::<Vec<_>>()
        };
        CheckpointData {
            config: config.clone(),
            n_global_classes,
            classes_per_task,
            seen_tasks,
            params: to_raw(&model.named_parameters()),
            prototypes: model.prototypes.clone(),
            expert_classes: model.expert_classes.clone(),
            fisher: fisher
                .iter()
                .map(|f| FisherRecord {
                    task_id: f.task_id,
                    prototype: f.prototype.clone(),
                    fisher: to_raw(&f.fisher),
                    anchor: to_raw(&f.anchor),
                })
                .collect(),
            snapshot: snapshot.map(|b| to_raw(&b.named_params("backbone"))),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut e = Enc { buf: Vec::new() };
        e.buf.extend_from_slice(MAGIC);
        e.buf.extend_from_slice(&VERSION.to_le_bytes());
        let cfg_json = self.config.to_json()?;
        e.str(&cfg_json);
        e.u64(self.n_global_classes as u64);
        e.u64(self.classes_per_task as u64);
        e.u64(self.seen_tasks as u64);
        e.named(&self.params);
        e.u64(self.prototypes.len() as u64);
        for p in &self.prototypes {
            e.u64(p.expert_id as u64);
            e.u64(p.update_count);
            e.buf.extend_from_slice(&p.ema_rate.to_le_bytes());
            e.f64s(&p.vector);
        }
        e.u64(self.expert_classes.len() as u64);
        for classes in &self.expert_classes {
            e.u64(classes.len() as u64);
            for &c in classes {
                e.u64(c as u64);
            }
        }
        e.u64(self.fisher.len() as u64);
        for f in &self.fisher {
            e.u64(f.task_id as u64);
            e.f64s(&f.prototype);
            e.named(&f.fisher);
            e.named(&f.anchor);
        }
        match &self.snapshot {
            Some(params) => {
                e.buf.push(1);
                e.named(params);
            }
            None => e.buf.push(0),
        }
        std::fs::write(path, &e.buf).map_err(|err| HiclError::io(path.display().to_string(), err))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes =
            std::fs::read(path).map_err(|e| HiclError::io(path.display().to_string(), e))?;
        let mut d = Dec {
            bytes: &bytes,
            pos: 0,
            path: path.display().to_string(),
        };
        if d.take(8, "magic")? != MAGIC {
            return Err(HiclError::Checkpoint(format!(
                "{}: not a checkpoint (bad magic)",
                path.display()
            )));
        }
        let version = d.u32("version")?;
        if version != VERSION {
            return Err(HiclError::Checkpoint(format!(
                "{}: format version {version}, expected {VERSION}",
                path.display()
            )));
        }
        let cfg_json = d.str("config")?;
        let config = RunConfig::from_json(&cfg_json)?;
        let n_global_classes = d.u64("n_global_classes")? as usize;
        let classes_per_task = d.u64("classes_per_task")? as usize;
        let seen_tasks = d.u64("seen_tasks")? as usize;
        let params = d.named("params")?;
        let n_protos = d.u64("prototypes")? as usize;
        let mut prototypes = Vec::with_capacity(n_protos);
        for _ in 0..n_protos {
            let expert_id = d.u64("prototype id")? as usize;
            let update_count = d.u64("prototype count")?;
            let ema_rate = f64::from_le_bytes(d.take(8, "prototype rate")?.try_into().unwrap());
            let vector = d.f64s("prototype vector")?;
            prototypes.push(Prototype {
                expert_id,
                vector,
                update_count,
                ema_rate,
            });
        }
        let n_assign = d.u64("expert classes")? as usize;
        let mut expert_classes = Vec::with_capacity(n_assign);
        for _ in 0..n_assign {
            let len = d.u64("class list")? as usize;
            let mut classes = Vec::with_capacity(len);
            for _ in 0..len {
                classes.push(d.u64("class id")? as usize);
            }
            expert_classes.push(classes);
        }
        let n_fisher = d.u64("fisher count")? as usize;
        let mut fisher = Vec::with_capacity(n_fisher);
        for _ in 0..n_fisher {
            fisher.push(FisherRecord {
                task_id: d.u64("fisher task")? as usize,
                prototype: d.f64s("fisher prototype")?,
                fisher: d.named("fisher diag")?,
                anchor: d.named("fisher anchor")?,
            });
        }
        let snapshot = match d.take(1, "snapshot flag")?[0] {
            0 => None,
            1 => Some(d.named("snapshot")?),
            _ => return Err(d.fail("snapshot flag")),
        };
        if d.pos != d.bytes.len() {
            return Err(d.fail("end of file (trailing bytes)"));
        }
        Ok(CheckpointData {
            config,
            n_global_classes,
            classes_per_task,
            seen_tasks,
            params,
            prototypes,
            expert_classes,
            fisher,
            snapshot,
        })
    }

    /// Rebuild live objects. The model is constructed from the stored
    /// config, then every parameter buffer is overwritten name-by-name.
    pub fn restore(&self) -> Result<RestoredState> {
        let mut model = HiclModel::new(&self.config, self.n_global_classes, self.classes_per_task)?;
        let live = model.named_parameters();
        if live.len() != self.params.len() {
            return Err(HiclError::Checkpoint(format!(
                "stored {} parameters, model has {}",
                self.params.len(),
                live.len()
            )));
        }
        for ((live_name, tensor), (stored_name, data)) in live.iter().zip(&self.params) {
            if live_name != stored_name {
                return Err(HiclError::Checkpoint(format!(
                    "parameter order mismatch: {live_name} vs {stored_name}"
                )));
            }
            tensor.set_data(data).map_err(|e| {
                HiclError::Checkpoint(format!("{stored_name}: {e}"))
            })?;
        }
        if self.prototypes.len() != model.prototypes.len()
            || self.expert_classes.len() != model.expert_classes.len()
        {
            return Err(HiclError::Checkpoint(
                "expert count differs from stored state".into(),
            ));
        }
        model.prototypes = self.prototypes.clone();
        model.expert_classes = self.expert_classes.clone();
        let fisher = self
            .fisher
            .iter()
            .map(|f| {
                FisherInfo::new(
                    f.task_id,
                    f.fisher.clone(),
                    f.anchor.clone(),
                    f.prototype.clone(),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let snapshot = match &self.snapshot {
            None => None,
            Some(named) => Some(rebuild_backbone(&model, named)?),
        };
        Ok(RestoredState {
            config: self.config.clone(),
            model,
            fisher,
            snapshot,
            seen_tasks: self.seen_tasks,
        })
    }
}

/// Reassemble a frozen backbone from stored named buffers, checking names
/// against the live registry layout.
fn rebuild_backbone(model: &HiclModel, named: &[(String, Vec<f64>)]) -> Result<Backbone> {
    let expect = model.backbone.named_params("backbone");
    if expect.len() != named.len() {
        return Err(HiclError::Checkpoint(format!(
            "snapshot holds {} buffers, backbone needs {}",
            named.len(),
            expect.len()
        )));
    }
    let mut layers = Vec::new();
    let mut it = named.iter();
    for layer in &model.backbone.layers {
        let (wn, weight) = it.next().expect("length checked");
        let (bn, bias) = it.next().expect("length checked");
        if !wn.ends_with(".weight") || !bn.ends_with(".bias") {
            return Err(HiclError::Checkpoint(format!(
                "snapshot layout mismatch: {wn}, {bn}"
            )));
        }
        layers.push(Dense::from_data(
            weight.clone(),
            bias.clone(),
            layer.in_dim,
            layer.out_dim,
            false,
        )?);
    }
    Ok(Backbone { layers })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;

    fn small_cfg() -> RunConfig {
        RunConfig {
            n_experts: 2,
            encoder: EncoderConfig {
                input_dim: 4,
                backbone_widths: vec![6],
                grid_units: 2,
                grid_dim: 3,
                dg_dim: 10,
                sparsity_rho: 0.3,
                ca3_widths: (6, 4),
                ca1_widths: vec![6],
                ln_eps: 1e-5,
            },
            ..RunConfig::default()
        }
    }

    fn dir() -> std::path::PathBuf {
        let d = std::env::temp_dir().join("hicl-ckpt-test");
        std::fs::create_dir_all(&d).unwrap();
        d
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let cfg = small_cfg();
        let mut model = HiclModel::new(&cfg, 4, 2).unwrap();
        model.assign_task(0, &[0, 1]).unwrap();
        model.prototypes[0].apply_ema(&vec![0.25; 10]).unwrap();
        let snap = model.backbone.frozen_copy().unwrap();
        let fisher = vec![FisherInfo::new(
            0,
            vec![("a".into(), vec![0.5, 0.1])],
            vec![("a".into(), vec![1.0, -1.0])],
            vec![0.25; 10],
        )
        .unwrap()];
        let data = CheckpointData::capture(&cfg, &model, &fisher, Some(&snap), 1, 4, 2);
        let p1 = dir().join("a.ckpt");
        let p2 = dir().join("b.ckpt");
        data.save(&p1).unwrap();
        let loaded = CheckpointData::load(&p1).unwrap();
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn restore_reproduces_model_outputs() {
        let cfg = small_cfg();
        let mut model = HiclModel::new(&cfg, 4, 2).unwrap();
        model.assign_task(0, &[0, 1]).unwrap();
        model.assign_task(1, &[2, 3]).unwrap();
        for p in &mut model.prototypes {
            p.apply_ema(&vec![0.5; 10]).unwrap();
        }
        let data = CheckpointData::capture(&cfg, &model, &[], None, 2, 4, 2);
        let p = dir().join("restore.ckpt");
        data.save(&p).unwrap();
        let restored = CheckpointData::load(&p).unwrap().restore().unwrap();
        let x = vec![0.3, 0.7, 0.1, 0.9];
        let (_, a) = model.forced_forward(&x, 0).unwrap();
        let (_, b) = restored.model.forced_forward(&x, 0).unwrap();
        assert_eq!(a.to_vec(), b.to_vec());
        let (ga, _) = model
            .moe_forward(&x, crate::router::GatingMode::Hard, true)
            .unwrap();
        let (gb, _) = restored
            .model
            .moe_forward(&x, crate::router::GatingMode::Hard, true)
            .unwrap();
        assert_eq!(ga, gb);
        assert_eq!(restored.seen_tasks, 2);
    }

    #[test]
    fn restore_rebuilds_snapshot_and_fisher() {
        let cfg = small_cfg();
        let model = HiclModel::new(&cfg, 4, 2).unwrap();
        let snap = model.backbone.frozen_copy().unwrap();
        let names: Vec<(String, Vec<f64>)> = model
            .named_parameters()
            .iter()
            .map(|(n, t)| (n.clone(), vec![0.0; t.len()]))
            .collect();
        let anchors: Vec<(String, Vec<f64>)> = model
            .named_parameters()
            .iter()
            .map(|(n, t)| (n.clone(), t.to_vec()))
            .collect();
        let fisher =
            vec![FisherInfo::new(0, names, anchors, vec![1.0; 10]).unwrap()];
        let data = CheckpointData::capture(&cfg, &model, &fisher, Some(&snap), 1, 4, 2);
        let p = dir().join("snapfish.ckpt");
        data.save(&p).unwrap();
        let restored = CheckpointData::load(&p).unwrap().restore().unwrap();
        assert_eq!(restored.fisher.len(), 1);
        assert_eq!(restored.fisher[0].task_id, 0);
        let snap = restored.snapshot.expect("snapshot present");
        let x = crate::tensor::Tensor::from_vec(vec![0.1, 0.2, 0.3, 0.4], &[4]).unwrap();
        let f_live = model.backbone.features(&x).unwrap().to_vec();
        let f_snap = snap.features(&x).unwrap().to_vec();
        assert_eq!(f_live, f_snap);
    }

    #[test]
    fn truncated_file_reports_checkpoint_error() {
        let cfg = small_cfg();
        let model = HiclModel::new(&cfg, 4, 2).unwrap();
        let data = CheckpointData::capture(&cfg, &model, &[], None, 0, 4, 2);
        let p = dir().join("trunc.ckpt");
        data.save(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(
            CheckpointData::load(&p).unwrap_err(),
            HiclError::Checkpoint(_)
        ));
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let p = dir().join("magic.ckpt");
        std::fs::write(&p, b"NOTACKPTxxxxxxxxxxx").unwrap();
        let err = CheckpointData::load(&p).unwrap_err();
        assert!(err.to_string().contains("magic"), "{err}");
    }
}
