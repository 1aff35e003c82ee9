//! Text persistence for [`SvmModel`].
//!
//! ```text
//! gastrace-svm v1
//! scalar f64
//! c <real>
//! gamma <real>
//! class_weight_malicious <real>
//! bias <real>
//! platt <a> <b>            (or `platt none`)
//! support_vectors <count> <dim>
//! sv <coef> <x_1> .. <x_dim>
//! end
//! ```

use std::io::{BufRead, Write};

use super::{PlattParams, SvmError, SvmHyperParams, SvmModel};
use crate::scalar::{fmt_real, parse_real, Scalar};

const MAGIC: &str = "gastrace-svm v1";

pub fn save_svm<S: Scalar, W: Write>(model: &SvmModel<S>, out: &mut W) -> Result<(), SvmError> {
    writeln!(out, "{MAGIC}")?;
    writeln!(out, "scalar {}", S::NAME)?;
    writeln!(out, "c {}", fmt_real(model.hyper.c))?;
    writeln!(out, "gamma {}", fmt_real(model.gamma))?;
    writeln!(
        out,
        "class_weight_malicious {}",
        fmt_real(model.hyper.class_weight_malicious)
    )?;
    writeln!(out, "bias {}", fmt_real(model.bias))?;
    match model.platt {
        Some(p) => writeln!(out, "platt {} {}", fmt_real(p.a), fmt_real(p.b))?,
        None => writeln!(out, "platt none")?,
    }
    let dim = model.support_vectors.first().map_or(0, |v| v.len());
    writeln!(out, "support_vectors {} {}", model.support_vectors.len(), dim)?;
    for (sv, coef) in model.support_vectors.iter().zip(&model.dual_coefs) {
        write!(out, "sv {}", fmt_real(*coef))?;
        for &v in sv {
            write!(out, " {}", fmt_real(v))?;
        }
        writeln!(out)?;
    }
    writeln!(out, "end")?;
    Ok(())
}

fn bad(msg: impl Into<String>) -> SvmError {
    SvmError::Format(msg.into())
}

fn keyed<'a>(line: Option<String>, key: &str) -> Result<Vec<String>, SvmError> {
    let line = line.ok_or_else(|| bad(format!("missing `{key}` line")))?;
    let mut parts = line.split_whitespace().map(str::to_string);
    match parts.next() {
        Some(k) if k == key => Ok(parts.collect()),
        _ => Err(bad(format!("expected `{key}`, found `{line}`"))),
    }
}

fn real<S: Scalar>(s: &str) -> Result<S, SvmError> {
    parse_real(s).ok_or_else(|| bad(format!("bad real `{s}`")))
}

fn single<S: Scalar>(line: Option<String>, key: &str) -> Result<S, SvmError> {
    let v = keyed(line, key)?;
    match v.as_slice() {
        [x] => real(x),
        _ => Err(bad(format!("`{key}` expects one value"))),
    }
}

pub fn load_svm<S: Scalar, R: BufRead>(input: R) -> Result<SvmModel<S>, SvmError> {
    let mut lines = input.lines().map(|l| l.ok());
    let mut next = || lines.next().flatten();
    if next().as_deref() != Some(MAGIC) {
        return Err(bad("not a gastrace SVM model"));
    }
    let scalar = keyed(next(), "scalar")?;
    if scalar.first().map(String::as_str) != Some(S::NAME) {
        return Err(bad(format!("model scalar {scalar:?} does not match {}", S::NAME)));
    }
    let c = single(next(), "c")?;
    let gamma = single(next(), "gamma")?;
    let class_weight_malicious = single(next(), "class_weight_malicious")?;
    let bias = single(next(), "bias")?;
    let platt = match keyed(next(), "platt")?.as_slice() {
        [n] if n == "none" => None,
        [a, b] => Some(PlattParams {
            a: real(a)?,
            b: real(b)?,
        }),
        _ => return Err(bad("malformed platt line")),
    };
    let counts = keyed(next(), "support_vectors")?;
    let (count, dim): (usize, usize) = match counts.as_slice() {
        [n, d] => (
            n.parse().map_err(|_| bad("bad count"))?,
            d.parse().map_err(|_| bad("bad dim"))?,
        ),
        _ => return Err(bad("malformed support_vectors line")),
    };
    let mut support_vectors = Vec::with_capacity(count);
    let mut dual_coefs = Vec::with_capacity(count);
    for _ in 0..count {
        let vals = keyed(next(), "sv")?;
        if vals.len() != dim + 1 {
            return Err(bad("support vector has wrong dimension"));
        }
        dual_coefs.push(real(&vals[0])?);
        support_vectors.push(vals[1..].iter().map(|v| real(v)).collect::<Result<_, _>>()?);
    }
    if next().as_deref() != Some("end") {
        return Err(bad("missing `end`"));
    }
    Ok(SvmModel {
        hyper: SvmHyperParams {
            c,
            gamma,
            class_weight_malicious,
        },
        support_vectors,
        dual_coefs,
        bias,
        gamma,
        platt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::svm::{fit_calibrated, SmoOptions};
    use crate::txmodel::Label;

    #[test]
    fn round_trip_is_bit_identical() {
        let x: Vec<Vec<f64>> = (0..16)
            .map(|i| vec![(i as f64 * 0.7).sin(), (i as f64 * 1.3).cos() / 3.0])
            .collect();
        let y: Vec<Label> = (0..16)
            .map(|i| if i % 4 == 0 { Label::Malicious } else { Label::Normal })
            .collect();
        let hp = SvmHyperParams {
            c: 10.0,
            gamma: 0.7,
            class_weight_malicious: 3.0,
        };
        let m = fit_calibrated(&x, &y, &hp, &SmoOptions::default(), 2, 4).unwrap();
        let mut buf = Vec::new();
        save_svm(&m, &mut buf).unwrap();
        let back: SvmModel<f64> = load_svm(buf.as_slice()).unwrap();
        assert_eq!(back, m);
        let mut again = Vec::new();
        save_svm(&back, &mut again).unwrap();
        assert_eq!(buf, again);
        assert!(load_svm::<f32, _>(buf.as_slice()).is_err());
    }
}
