//! Binary checkpointing of a training run: everything needed to continue —
//! config, both networks, both optimizer states, the iteration counter, and
//! the batch-sampling state — in one versioned little-endian file.

use std::path::Path;

use crate::error::{Error, Result};
use crate::net::ParamSet;
use crate::optim::{AdamHyper, OptimizerState};
use crate::tensor::Tensor;
use crate::train::TrainConfig;

const MAGIC: &[u8; 4] = b"ALDK";
const VERSION: u32 = 1;

/// Complete training state between outer iterations.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// One parameter set per cascade stage.
    pub student: Vec<ParamSet>,
    pub critic: ParamSet,
    pub student_opt: Vec<OptimizerState>,
    pub critic_opt: OptimizerState,
    /// Completed outer iterations.
    pub iteration: u64,
    /// Batch-sampling generator state.
    pub rng_state: u64,
    /// Current epoch's record order and the position within it.
    pub epoch_order: Vec<u32>,
    pub epoch_pos: u32,
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, encode(ckpt)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    decode(&bytes, &path.display().to_string())
}

fn encode(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    w_u32(&mut out, VERSION);
    let config = serde_json::to_vec(&ckpt.config)?;
    w_u64(&mut out, config.len() as u64);
    out.extend_from_slice(&config);
    w_u32(&mut out, ckpt.student.len() as u32);
    for stage in &ckpt.student {
        w_params(&mut out, stage);
    }
    w_params(&mut out, &ckpt.critic);
    for state in &ckpt.student_opt {
        w_opt(&mut out, state);
    }
    w_opt(&mut out, &ckpt.critic_opt);
    w_u64(&mut out, ckpt.iteration);
    w_u64(&mut out, ckpt.rng_state);
    w_u32(&mut out, ckpt.epoch_order.len() as u32);
    for &i in &ckpt.epoch_order {
        w_u32(&mut out, i);
    }
    w_u32(&mut out, ckpt.epoch_pos);
    Ok(out)
}

fn decode(bytes: &[u8], path: &str) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0, path };
    if r.take(4)? != MAGIC {
        return Err(r.fail("not a checkpoint file (bad magic)"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.fail(format!("unsupported checkpoint version {version}")));
    }
    let config_len = r.u64()? as usize;
    let config: TrainConfig = serde_json::from_slice(r.take(config_len)?)
        .map_err(|e| Error::format(path, format!("config block: {e}")))?;
    let cascades = r.u32()? as usize;
    let student = (0..cascades).map(|_| r.params()).collect::<Result<Vec<_>>>()?;
    let critic = r.params()?;
    let student_opt = (0..cascades).map(|_| r.opt()).collect::<Result<Vec<_>>>()?;
    let critic_opt = r.opt()?;
    let iteration = r.u64()?;
    let rng_state = r.u64()?;
    let epoch_len = r.u32()? as usize;
    let epoch_order = (0..epoch_len).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let epoch_pos = r.u32()?;
    r.finish()?;
    Ok(Checkpoint {
        config,
        student,
        critic,
        student_opt,
        critic_opt,
        iteration,
        rng_state,
        epoch_order,
        epoch_pos,
    })
}

fn w_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn w_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn w_f32(out: &mut Vec<u8>, v: f32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn w_tensor(out: &mut Vec<u8>, t: &Tensor) {
    w_u32(out, t.shape().len() as u32);
    for &d in t.shape() {
        w_u32(out, d as u32);
    }
    for &v in t.data() {
        w_f32(out, v);
    }
}

fn w_params(out: &mut Vec<u8>, params: &ParamSet) {
    w_u32(out, params.len() as u32);
    for (name, tensor) in params.entries() {
        w_u32(out, name.len() as u32);
        out.extend_from_slice(name.as_bytes());
        w_tensor(out, tensor);
    }
}

fn w_opt(out: &mut Vec<u8>, state: &OptimizerState) {
    w_u64(out, state.step_count());
    let h = state.hyper();
    w_f32(out, h.beta1);
    w_f32(out, h.beta2);
    w_f32(out, h.eps);
    w_u32(out, state.first_moments().len() as u32);
    for t in state.first_moments() {
        w_tensor(out, t);
    }
    for t in state.second_moments() {
        w_tensor(out, t);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl<'a> Reader<'a> {
    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::format(self.path, reason)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.fail("unexpected end of file"));
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn tensor(&mut self) -> Result<Tensor> {
        let ndim = self.u32()? as usize;
        if ndim > 8 {
            return Err(self.fail(format!("implausible tensor rank {ndim}")));
        }
        let mut shape = Vec::with_capacity(ndim);
        let mut count = 1usize;
        for _ in 0..ndim {
            let d = self.u32()? as usize;
            count = count
                .checked_mul(d)
                .ok_or_else(|| self.fail("tensor extent overflow"))?;
            shape.push(d);
        }
        let raw = self.take(4 * count)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Tensor::new(shape, data)
            .map_err(|e| self.fail(format!("malformed tensor: {e}")))
    }

    fn params(&mut self) -> Result<ParamSet> {
        let n = self.u32()? as usize;
        let mut set = ParamSet::new();
        for _ in 0..n {
            let name_len = self.u32()? as usize;
            let name = std::str::from_utf8(self.take(name_len)?)
                .map_err(|_| self.fail("parameter name is not UTF-8"))?
                .to_string();
            let tensor = self.tensor()?;
            set.push(name, tensor)
                .map_err(|e| self.fail(format!("parameter table: {e}")))?;
        }
        Ok(set)
    }

    fn opt(&mut self) -> Result<OptimizerState> {
        let step = self.u64()?;
        let hyper = AdamHyper { beta1: self.f32()?, beta2: self.f32()?, eps: self.f32()? };
        let n = self.u32()? as usize;
        let m = (0..n).map(|_| self.tensor()).collect::<Result<Vec<_>>>()?;
        let v = (0..n).map(|_| self.tensor()).collect::<Result<Vec<_>>>()?;
        OptimizerState::from_parts(m, v, step, hyper)
            .map_err(|e| self.fail(format!("optimizer state: {e}")))
    }

    fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(self.fail(format!(
                "{} trailing bytes after the checkpoint payload",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_params(seed: f32) -> ParamSet {
        let mut p = ParamSet::new();
        p.push("a.weight", Tensor::new(vec![2, 3], vec![seed; 6]).unwrap()).unwrap();
        p.push("a.bias", Tensor::new(vec![3], vec![-seed, 0.0, seed]).unwrap()).unwrap();
        p
    }

    fn sample_opt(params: &ParamSet, step: u64) -> OptimizerState {
        let m = params.entries().iter().map(|(_, t)| t.clone()).collect();
        let v = params
            .entries()
            .iter()
            .map(|(_, t)| {
                Tensor::new(t.shape().to_vec(), t.data().iter().map(|x| x * x).collect())
                    .unwrap()
            })
            .collect();
        OptimizerState::from_parts(m, v, step, AdamHyper::default()).unwrap()
    }

    fn sample_checkpoint() -> Checkpoint {
        let student = vec![sample_params(0.25), sample_params(1.5)];
        let critic = sample_params(-0.75);
        let student_opt = student.iter().map(|p| sample_opt(p, 7)).collect::<Vec<_>>();
        let critic_opt = sample_opt(&critic, 3);
        Checkpoint {
            config: TrainConfig { cascades: 2, extent: 16, ..TrainConfig::default() },
            student,
            critic,
            student_opt,
            critic_opt,
            iteration: 7,
            rng_state: 0xDEAD_BEEF_0123_4567,
            epoch_order: vec![2, 0, 1],
            epoch_pos: 1,
        }
    }

    #[test]
    fn round_trip_preserves_every_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ckpt");
        let original = sample_checkpoint();
        save_checkpoint(&path, &original).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config, original.config);
        assert_eq!(loaded.iteration, 7);
        assert_eq!(loaded.rng_state, original.rng_state);
        assert_eq!(loaded.epoch_order, original.epoch_order);
        assert_eq!(loaded.epoch_pos, 1);
        for (a, b) in loaded.student.iter().zip(&original.student) {
            for ((na, ta), (nb, tb)) in a.entries().iter().zip(b.entries()) {
                assert_eq!(na, nb);
                assert_eq!(ta.shape(), tb.shape());
                assert_eq!(ta.data(), tb.data());
            }
        }
        assert_eq!(loaded.critic_opt.step_count(), 3);
        for (a, b) in loaded
            .critic_opt
            .second_moments()
            .iter()
            .zip(original.critic_opt.second_moments())
        {
            assert_eq!(a.data(), b.data());
        }
        // Save → load → save is byte-stable.
        let path2 = dir.path().join("again.ckpt");
        save_checkpoint(&path2, &loaded).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ckpt");
        save_checkpoint(&path, &sample_checkpoint()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        match load_checkpoint(&path) {
            Err(Error::Format { reason, .. }) => assert!(reason.contains("magic")),
            other => panic!("expected a format error, got {other:?}"),
        }
    }

    #[test]
    fn unsupported_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ckpt");
        save_checkpoint(&path, &sample_checkpoint()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[4..8].copy_from_slice(&99u32.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        match load_checkpoint(&path) {
            Err(Error::Format { reason, .. }) => assert!(reason.contains("version 99")),
            other => panic!("expected a format error, got {other:?}"),
        }
    }

    #[test]
    fn truncated_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ckpt");
        save_checkpoint(&path, &sample_checkpoint()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        for keep in [bytes.len() / 2, bytes.len() - 2] {
            std::fs::write(&path, &bytes[..keep]).unwrap();
            assert!(
                matches!(load_checkpoint(&path), Err(Error::Format { .. })),
                "truncation to {keep} bytes must be detected"
            );
        }
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.ckpt");
        save_checkpoint(&path, &sample_checkpoint()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.extend_from_slice(&[0, 0, 0]);
        std::fs::write(&path, &bytes).unwrap();
        match load_checkpoint(&path) {
            Err(Error::Format { reason, .. }) => assert!(reason.contains("trailing")),
            other => panic!("expected a format error, got {other:?}"),
        }
    }
}
