//! Versioned text checkpoints for [`GatModel`].
//!
//! ```text
//! gastrace-gat v1
//! scalar f64
//! seed <u64>
//! nfeat <n> nhid <n> nclass <n> heads <n>
//! lr <real>
//! dropout <real>
//! weight_decay <real>
//! tensor <name> <len>
//! <real> ...
//! end
//! ```

use std::io::{BufRead, Write};

use super::{AttentionHead, GatError, GatHyperParams, GatModel, Matrix};
use crate::scalar::{fmt_real, parse_real, Scalar};

const MAGIC: &str = "gastrace-gat v1";

/// Trained parameters plus what is needed to reproduce them.
#[derive(Debug, Clone, PartialEq)]
pub struct GatCheckpoint<S> {
    pub hyper: GatHyperParams<S>,
    pub seed: u64,
    pub model: GatModel<S>,
}

fn tensor_names(heads: usize) -> Vec<String> {
    let mut v = Vec::new();
    for h in 0..heads {
        v.push(format!("head{h}.weight"));
        v.push(format!("head{h}.attention"));
    }
    v.push("output.weight".into());
    v.push("output.attention".into());
    v
}

pub fn save_gat<S: Scalar, W: Write>(ck: &GatCheckpoint<S>, out: &mut W) -> Result<(), GatError> {
    let m = &ck.model;
    let hp = &ck.hyper;
    writeln!(out, "{MAGIC}")?;
    writeln!(out, "scalar {}", S::NAME)?;
    writeln!(out, "seed {}", ck.seed)?;
    writeln!(
        out,
        "nfeat {} nhid {} nclass {} heads {}",
        m.nfeat(),
        m.nhid(),
        m.nclass(),
        m.heads.len()
    )?;
    writeln!(out, "lr {}", fmt_real(hp.lr))?;
    writeln!(out, "dropout {}", fmt_real(hp.dropout))?;
    writeln!(out, "weight_decay {}", fmt_real(hp.weight_decay))?;
    for (name, t) in tensor_names(m.heads.len()).iter().zip(m.tensors()) {
        writeln!(out, "tensor {name} {}", t.len())?;
        let line: Vec<String> = t.iter().map(|&x| fmt_real(x)).collect();
        writeln!(out, "{}", line.join(" "))?;
    }
    writeln!(out, "end")?;
    Ok(())
}

fn bad(msg: impl Into<String>) -> GatError {
    GatError::Format(msg.into())
}

struct Lines<R> {
    inner: std::io::Lines<R>,
}

impl<R: BufRead> Lines<R> {
    fn next(&mut self, what: &str) -> Result<String, GatError> {
        match self.inner.next() {
            Some(l) => Ok(l?),
            None => Err(bad(format!("truncated before {what}"))),
        }
    }

    fn keyed(&mut self, key: &str) -> Result<String, GatError> {
        let line = self.next(key)?;
        match line.split_once(' ') {
            Some((k, v)) if k == key => Ok(v.trim().to_string()),
            _ => Err(bad(format!("expected `{key}`, found `{line}`"))),
        }
    }
}

fn real<S: Scalar>(s: &str) -> Result<S, GatError> {
    parse_real(s).ok_or_else(|| bad(format!("bad real `{s}`")))
}

fn count(s: &str) -> Result<usize, GatError> {
    s.parse().map_err(|_| bad(format!("bad count `{s}`")))
}

pub fn load_gat<S: Scalar, R: BufRead>(input: R) -> Result<GatCheckpoint<S>, GatError> {
    let mut lines = Lines {
        inner: input.lines(),
    };
    if lines.next("header")? != MAGIC {
        return Err(bad("not a gastrace GAT checkpoint"));
    }
    let scalar = lines.keyed("scalar")?;
    if scalar != S::NAME {
        return Err(bad(format!("checkpoint holds {scalar}, expected {}", S::NAME)));
    }
    let seed = lines
        .keyed("seed")?
        .parse()
        .map_err(|_| bad("bad seed"))?;
    let dims = lines.next("dimensions")?;
    let parts: Vec<&str> = dims.split_whitespace().collect();
    let [_, nfeat, _, nhid, _, nclass, _, heads] = parts.as_slice() else {
        return Err(bad(format!("bad dimension line `{dims}`")));
    };
    let (nfeat, nhid, nclass, heads) = (count(nfeat)?, count(nhid)?, count(nclass)?, count(heads)?);
    let hyper = GatHyperParams {
        nfeat,
        nclass,
        nhid,
        lr: real(&lines.keyed("lr")?)?,
        dropout: real(&lines.keyed("dropout")?)?,
        weight_decay: real(&lines.keyed("weight_decay")?)?,
    };
    let head = |rows, cols| AttentionHead {
        weight: Matrix::zeros(rows, cols),
        attention: vec![S::zero(); 2 * cols],
    };
    let mut model = GatModel {
        heads: (0..heads).map(|_| head(nfeat, nhid)).collect(),
        output: head(heads * nhid, nclass),
    };
    for (name, t) in tensor_names(heads).iter().zip(model.tensors_mut()) {
        let h = lines.keyed("tensor")?;
        let expected = format!("{name} {}", t.len());
        if h != expected {
            return Err(bad(format!("expected tensor `{expected}`, found `{h}`")));
        }
        let data = lines.next(name)?;
        let values = data
            .split_whitespace()
            .map(real::<S>)
            .collect::<Result<Vec<_>, _>>()?;
        if values.len() != t.len() {
            return Err(bad(format!("tensor {name} has {} values", values.len())));
        }
        t.copy_from_slice(&values);
    }
    if lines.next("end")? != "end" {
        return Err(bad("missing end marker"));
    }
    Ok(GatCheckpoint { hyper, seed, model })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn checkpoint<S: Scalar>() -> GatCheckpoint<S> {
        let hyper = GatHyperParams {
            nfeat: 5,
            nclass: 2,
            nhid: 3,
            lr: S::lit(0.005),
            dropout: S::lit(0.6),
            weight_decay: S::lit(5e-4),
        };
        let model = GatModel::init(&hyper, 4, &mut ChaCha8Rng::seed_from_u64(11));
        GatCheckpoint {
            hyper,
            seed: 77,
            model,
        }
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let ck = checkpoint::<f64>();
        let mut buf = Vec::new();
        save_gat(&ck, &mut buf).unwrap();
        let back: GatCheckpoint<f64> = load_gat(&buf[..]).unwrap();
        assert_eq!(back, ck);
        let bits = |c: &GatCheckpoint<f64>| -> Vec<u64> {
            c.model.tensors().iter().flat_map(|t| t.iter().map(|x| x.to_bits())).collect()
        };
        assert_eq!(bits(&back), bits(&ck));

        let ck32 = checkpoint::<f32>();
        let mut buf = Vec::new();
        save_gat(&ck32, &mut buf).unwrap();
        assert_eq!(load_gat::<f32, _>(&buf[..]).unwrap(), ck32);
    }

    #[test]
    fn rejects_wrong_scalar_and_truncation() {
        let mut buf = Vec::new();
        save_gat(&checkpoint::<f64>(), &mut buf).unwrap();
        assert!(matches!(load_gat::<f32, _>(&buf[..]), Err(GatError::Format(_))));
        let cut = &buf[..buf.len() / 2];
        assert!(load_gat::<f64, _>(cut).is_err());
    }
}
