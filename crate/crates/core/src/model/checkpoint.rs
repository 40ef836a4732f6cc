//! Text checkpoint holding everything needed to resume training bit-identically.
//!
//! Every float is stored as the hex of its IEEE-754 bit pattern:
//!
//! ```text
//! rcl-checkpoint-v1
//! shape <D> <hidden> <feat> <embed> <L>
//! epoch <completed epochs>
//! rng <seed hex> <stream> <word_pos>
//! compression none | <hex> ...
//! params <n> <hex> ...
//! velocity <n> <hex> ...
//! history <records>
//! record <epoch> <total> <cls> <con> <val_am> <val_hm> <factor hex> ...
//! end
//! ```

use std::fmt::Write as _;
use std::path::Path;

use super::train::{EpochRecord, TrainConfig, TrainHistory, Trainer};
use super::{ModelParams, ModelShape, SgdState};
use crate::data::{BatchSampler, Dataset, RngState};
use crate::error::{Error, Result};
use crate::losses::CompressionMap;

pub const CHECKPOINT_MAGIC: &str = "rcl-checkpoint-v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub shape: ModelShape,
    pub epoch: usize,
    pub rng: RngState,
    pub compression: Option<Vec<f64>>,
    pub params: Vec<f64>,
    pub velocity: Vec<f64>,
    pub history: Vec<EpochRecord>,
}

fn hex(v: f64) -> String {
    format!("{:016x}", v.to_bits())
}

fn hex_list(out: &mut String, vals: &[f64]) {
    for &v in vals {
        out.push(' ');
        out.push_str(&hex(v));
    }
}

impl Checkpoint {
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let s = &self.shape;
        writeln!(out, "{CHECKPOINT_MAGIC}").unwrap();
        writeln!(
            out,
            "shape {} {} {} {} {}",
            s.input_dim, s.hidden, s.feat_dim, s.embed_dim, s.num_classes
        )
        .unwrap();
        writeln!(out, "epoch {}", self.epoch).unwrap();
        let seed: String = self.rng.seed.iter().map(|b| format!("{b:02x}")).collect();
        writeln!(out, "rng {seed} {} {}", self.rng.stream, self.rng.word_pos).unwrap();
        match &self.compression {
            None => out.push_str("compression none\n"),
            Some(f) => {
                out.push_str("compression");
                hex_list(&mut out, f);
                out.push('\n');
            }
        }
        write!(out, "params {}", self.params.len()).unwrap();
        hex_list(&mut out, &self.params);
        out.push('\n');
        write!(out, "velocity {}", self.velocity.len()).unwrap();
        hex_list(&mut out, &self.velocity);
        out.push('\n');
        writeln!(out, "history {}", self.history.len()).unwrap();
        for r in &self.history {
            write!(out, "record {}", r.epoch).unwrap();
            hex_list(
                &mut out,
                &[
                    r.total_loss,
                    r.classifier_loss,
                    r.contrastive_loss,
                    r.val_arithmetic,
                    r.val_harmonic,
                ],
            );
            hex_list(&mut out, &r.compression);
            out.push('\n');
        }
        out.push_str("end\n");
        out
    }

    pub fn from_text(text: &str, source: &str) -> Result<Self> {
        let mut p = LineParser {
            lines: text.lines().enumerate(),
            source,
            line: 0,
        };
        let magic = p.next_line()?;
        if magic != CHECKPOINT_MAGIC {
            return Err(p.err(format!("expected `{CHECKPOINT_MAGIC}`, got `{magic}`")));
        }
        let dims = p.fields("shape")?;
        if dims.len() != 5 {
            return Err(p.err("shape needs 5 integers".into()));
        }
        let d: Vec<usize> = dims.iter().map(|t| p.int(t)).collect::<Result<_>>()?;
        let shape = ModelShape {
            input_dim: d[0],
            hidden: d[1],
            feat_dim: d[2],
            embed_dim: d[3],
            num_classes: d[4],
        };
        let epoch = {
            let f = p.fields("epoch")?;
            p.int(f.first().ok_or_else(|| p.err("missing epoch".into()))?)?
        };
        let rng = {
            let f = p.fields("rng")?;
            if f.len() != 3 || f[0].len() != 64 {
                return Err(p.err("rng needs <64 hex seed> <stream> <word_pos>".into()));
            }
            let mut seed = [0u8; 32];
            for (i, b) in seed.iter_mut().enumerate() {
                *b = u8::from_str_radix(&f[0][2 * i..2 * i + 2], 16)
                    .map_err(|e| p.err(format!("bad rng seed: {e}")))?;
            }
            RngState {
                seed,
                stream: f[1].parse().map_err(|e| p.err(format!("bad stream: {e}")))?,
                word_pos: f[2].parse().map_err(|e| p.err(format!("bad word_pos: {e}")))?,
            }
        };
        let compression = {
            let f = p.fields("compression")?;
            if f == ["none"] {
                None
            } else {
                Some(f.iter().map(|t| p.float(t)).collect::<Result<Vec<_>>>()?)
            }
        };
        let params = p.counted_floats("params")?;
        let velocity = p.counted_floats("velocity")?;
        let n_hist = {
            let f = p.fields("history")?;
            p.int(f.first().ok_or_else(|| p.err("missing history count".into()))?)?
        };
        let mut history = Vec::with_capacity(n_hist);
        for _ in 0..n_hist {
            let f = p.fields("record")?;
            if f.len() < 6 {
                return Err(p.err("record needs epoch and 5 values".into()));
            }
            let vals: Vec<f64> = f[1..].iter().map(|t| p.float(t)).collect::<Result<_>>()?;
            history.push(EpochRecord {
                epoch: p.int(&f[0])?,
                total_loss: vals[0],
                classifier_loss: vals[1],
                contrastive_loss: vals[2],
                val_arithmetic: vals[3],
                val_harmonic: vals[4],
                compression: vals[5..].to_vec(),
            });
        }
        if p.next_line()? != "end" {
            return Err(p.err("expected `end`".into()));
        }
        let ckpt = Self {
            shape,
            epoch,
            rng,
            compression,
            params,
            velocity,
            history,
        };
        let expected = ModelParams::init(shape, 0)
            .map_err(|e| p.err(e.to_string()))?
            .num_params();
        if ckpt.params.len() != expected || ckpt.velocity.len() != expected {
            return Err(p.err(format!(
                "shape implies {expected} parameters, found {} params / {} velocities",
                ckpt.params.len(),
                ckpt.velocity.len()
            )));
        }
        Ok(ckpt)
    }
}

struct LineParser<'t, I: Iterator<Item = (usize, &'t str)>> {
    lines: I,
    source: &'t str,
    line: usize,
}

impl<'t, I: Iterator<Item = (usize, &'t str)>> LineParser<'t, I> {
    fn err(&self, reason: String) -> Error {
        Error::Parse {
            path: self.source.to_string(),
            line: self.line,
            reason,
        }
    }

    fn next_line(&mut self) -> Result<&'t str> {
        match self.lines.next() {
            Some((i, l)) => {
                self.line = i + 1;
                Ok(l)
            }
            None => {
                self.line += 1;
                Err(self.err("unexpected end of checkpoint".into()))
            }
        }
    }

    fn fields(&mut self, key: &str) -> Result<Vec<String>> {
        let line = self.next_line()?;
        let mut it = line.split_ascii_whitespace();
        if it.next() != Some(key) {
            return Err(self.err(format!("expected `{key}` line")));
        }
        Ok(it.map(str::to_string).collect())
    }

    fn int(&self, t: &str) -> Result<usize> {
        t.parse()
            .map_err(|e| self.err(format!("bad integer `{t}`: {e}")))
    }

    fn float(&self, t: &str) -> Result<f64> {
        u64::from_str_radix(t, 16)
            .map(f64::from_bits)
            .map_err(|e| self.err(format!("bad float bits `{t}`: {e}")))
    }

    fn counted_floats(&mut self, key: &str) -> Result<Vec<f64>> {
        let f = self.fields(key)?;
        let n = self.int(f.first().ok_or_else(|| self.err(format!("missing {key} count")))?)?;
        if f.len() != n + 1 {
            return Err(self.err(format!("{key}: declared {n} values, found {}", f.len() - 1)));
        }
        f[1..].iter().map(|t| self.float(t)).collect()
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    std::fs::write(path, ckpt.to_text()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_text(&text, &path.display().to_string())
}

impl<'a> Trainer<'a> {
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            shape: self.params.shape(),
            epoch: self.epoch,
            rng: self.sampler.state(),
            compression: self.compression.as_ref().map(|m| m.factors().to_vec()),
            params: self.params.to_flat(),
            velocity: self.optimizer.velocity.clone(),
            history: self.history.records.clone(),
        }
    }

    /// Rebuilds a trainer from a checkpoint taken with the same datasets and config.
    pub fn resume(
        train: &'a Dataset,
        val: &'a Dataset,
        config: TrainConfig,
        ckpt: &Checkpoint,
    ) -> Result<Self> {
        let mut t = Trainer::new(train, val, config)?;
        if t.params.shape() != ckpt.shape {
            return Err(Error::invalid(
                "checkpoint",
                format!(
                    "shape {:?} does not match config {:?}",
                    ckpt.shape,
                    t.params.shape()
                ),
            ));
        }
        t.params.set_flat(&ckpt.params)?;
        t.optimizer = SgdState {
            velocity: ckpt.velocity.clone(),
        };
        t.sampler = BatchSampler::from_state(ckpt.rng);
        t.epoch = ckpt.epoch;
        t.compression = ckpt
            .compression
            .clone()
            .map(CompressionMap::new)
            .transpose()?;
        t.history = TrainHistory {
            records: ckpt.history.clone(),
        };
        Ok(t)
    }
}
