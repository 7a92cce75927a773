//! Per-step trace files.
//!
//! CSV, one row per step, header:
//!
//! ```text
//! step,t,sigma,lambda,activated,s1,s2,gsim_norm,neighbor_id,degenerate
//! ```
//!
//! `sigma` and `neighbor_id` are empty on unscored steps, `degenerate` is
//! empty, `cusp` or `tie`, and `lambda` may be `-inf`.
//!
//! Binary (little-endian), version 1:
//!
//! ```text
//! magic "AMGT" | u32 version | u64 seed | u32 record count
//! per record: u32 step | u32 t | f64 sigma (NaN if unscored) | f64 lambda
//!             | u8 activated | f64 s1 | f64 s2 | f64 gsim_norm
//!             | i64 neighbor_id (-1 if unscored) | u8 degenerate (0 none, 1 cusp, 2 tie)
//! ```

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::sampler::StepRecord;
use crate::similarity::Degeneracy;

pub const BINARY_MAGIC: &[u8; 4] = b"AMGT";
pub const BINARY_VERSION: u32 = 1;

pub const CSV_HEADER: [&str; 10] = [
    "step", "t", "sigma", "lambda", "activated", "s1", "s2", "gsim_norm", "neighbor_id", "degenerate",
];

/// `trace_seed{seed}_{hash prefix}.{ext}`
pub fn trace_file_name(seed: u64, config_hash: &str, ext: &str) -> String {
    let short = &config_hash[..config_hash.len().min(12)];
    format!("trace_seed{seed}_{short}.{ext}")
}

fn degen_str(d: Option<Degeneracy>) -> &'static str {
    match d {
        None => "",
        Some(Degeneracy::Cusp) => "cusp",
        Some(Degeneracy::Tie) => "tie",
    }
}

fn parse_err(reason: impl Into<String>) -> Error {
    Error::Parse { path: "trace".into(), reason: reason.into() }
}

pub fn write_csv<W: Write>(w: W, records: &[StepRecord]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let map = |e: csv::Error| parse_err(e.to_string());
    wr.write_record(CSV_HEADER).map_err(map)?;
    for r in records {
        wr.write_record([
            r.step.to_string(),
            r.t.to_string(),
            r.sigma.map(|s| s.to_string()).unwrap_or_default(),
            r.lambda.to_string(),
            (r.activated as u8).to_string(),
            r.s1.to_string(),
            r.s2.to_string(),
            r.gsim_norm.to_string(),
            r.neighbor_id.map(|n| n.to_string()).unwrap_or_default(),
            degen_str(r.degenerate).to_string(),
        ])
        .map_err(map)?;
    }
    wr.flush().map_err(|e| parse_err(e.to_string()))
}

pub fn read_csv<R: Read>(r: R) -> Result<Vec<StepRecord>> {
    let mut rd = csv::Reader::from_reader(r);
    let h = rd.headers().map_err(|e| parse_err(e.to_string()))?;
    if h.iter().collect::<Vec<_>>() != CSV_HEADER {
        return Err(parse_err("unexpected trace header"));
    }
    let mut out = Vec::new();
    for rec in rd.records() {
        let rec = rec.map_err(|e| parse_err(e.to_string()))?;
        let f = |i: usize| rec.get(i).unwrap_or("");
        let num = |i: usize| f(i).parse::<f64>().map_err(|_| parse_err(format!("bad number in column {}", CSV_HEADER[i])));
        let int = |i: usize| f(i).parse::<usize>().map_err(|_| parse_err(format!("bad integer in column {}", CSV_HEADER[i])));
        out.push(StepRecord {
            step: int(0)?,
            t: int(1)?,
            sigma: if f(2).is_empty() { None } else { Some(num(2)?) },
            lambda: num(3)?,
            activated: f(4) == "1",
            s1: num(5)?,
            s2: num(6)?,
            gsim_norm: num(7)?,
            neighbor_id: if f(8).is_empty() { None } else { Some(int(8)?) },
            degenerate: match f(9) {
                "" => None,
                "cusp" => Some(Degeneracy::Cusp),
                "tie" => Some(Degeneracy::Tie),
                other => return Err(parse_err(format!("unknown degeneracy {other}"))),
            },
        });
    }
    Ok(out)
}

pub fn write_binary<W: Write>(mut w: W, seed: u64, records: &[StepRecord]) -> std::io::Result<()> {
    w.write_all(BINARY_MAGIC)?;
    w.write_all(&BINARY_VERSION.to_le_bytes())?;
    w.write_all(&seed.to_le_bytes())?;
    w.write_all(&(records.len() as u32).to_le_bytes())?;
    for r in records {
        w.write_all(&(r.step as u32).to_le_bytes())?;
        w.write_all(&(r.t as u32).to_le_bytes())?;
        w.write_all(&r.sigma.unwrap_or(f64::NAN).to_le_bytes())?;
        w.write_all(&r.lambda.to_le_bytes())?;
        w.write_all(&[r.activated as u8])?;
        w.write_all(&r.s1.to_le_bytes())?;
        w.write_all(&r.s2.to_le_bytes())?;
        w.write_all(&r.gsim_norm.to_le_bytes())?;
        w.write_all(&r.neighbor_id.map(|n| n as i64).unwrap_or(-1).to_le_bytes())?;
        let d = match r.degenerate {
            None => 0u8,
            Some(Degeneracy::Cusp) => 1,
            Some(Degeneracy::Tie) => 2,
        };
        w.write_all(&[d])?;
    }
    Ok(())
}

pub fn read_binary<R: Read>(mut r: R) -> Result<(u64, Vec<StepRecord>)> {
    let io = |e: std::io::Error| parse_err(e.to_string());
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    let mut b1 = [0u8; 1];
    r.read_exact(&mut b4).map_err(io)?;
    if &b4 != BINARY_MAGIC {
        return Err(parse_err("not a trace file"));
    }
    r.read_exact(&mut b4).map_err(io)?;
    let version = u32::from_le_bytes(b4);
    if version != BINARY_VERSION {
        return Err(parse_err(format!("unsupported trace version {version}")));
    }
    r.read_exact(&mut b8).map_err(io)?;
    let seed = u64::from_le_bytes(b8);
    r.read_exact(&mut b4).map_err(io)?;
    let n = u32::from_le_bytes(b4) as usize;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let mut u32f = || -> Result<u32> {
            r.read_exact(&mut b4).map_err(io)?;
            Ok(u32::from_le_bytes(b4))
        };
        let step = u32f()? as usize;
        let t = u32f()? as usize;
        let mut f64f = || -> Result<f64> {
            r.read_exact(&mut b8).map_err(io)?;
            Ok(f64::from_le_bytes(b8))
        };
        let sigma = f64f()?;
        let lambda = f64f()?;
        r.read_exact(&mut b1).map_err(io)?;
        let activated = b1[0] == 1;
        let mut f64f = || -> Result<f64> {
            r.read_exact(&mut b8).map_err(io)?;
            Ok(f64::from_le_bytes(b8))
        };
        let s1 = f64f()?;
        let s2 = f64f()?;
        let gsim_norm = f64f()?;
        r.read_exact(&mut b8).map_err(io)?;
        let nb = i64::from_le_bytes(b8);
        r.read_exact(&mut b1).map_err(io)?;
        let degenerate = match b1[0] {
            0 => None,
            1 => Some(Degeneracy::Cusp),
            2 => Some(Degeneracy::Tie),
            k => return Err(parse_err(format!("bad degeneracy code {k}"))),
        };
        out.push(StepRecord {
            step,
            t,
            sigma: if sigma.is_nan() { None } else { Some(sigma) },
            lambda,
            activated,
            s1,
            s2,
            gsim_norm,
            neighbor_id: if nb < 0 { None } else { Some(nb as usize) },
            degenerate,
        });
    }
    Ok((seed, out))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<StepRecord> {
        vec![
            StepRecord {
                step: 0,
                t: 249,
                sigma: Some(-1.9712345678901234),
                lambda: -1.9499999,
                activated: false,
                s1: 0.0,
                s2: 0.0,
                gsim_norm: 0.0,
                neighbor_id: Some(17),
                degenerate: None,
            },
            StepRecord {
                step: 1,
                t: 244,
                sigma: None,
                lambda: f64::NEG_INFINITY,
                activated: false,
                s1: 0.25,
                s2: 1.0 / 3.0,
                gsim_norm: 0.1,
                neighbor_id: None,
                degenerate: Some(Degeneracy::Tie),
            },
        ]
    }

    #[test]
    fn csv_round_trip() {
        let mut buf = Vec::new();
        write_csv(&mut buf, &sample()).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("step,t,sigma,lambda,activated"));
        assert_eq!(read_csv(&buf[..]).unwrap(), sample());
    }

    #[test]
    fn binary_round_trip() {
        let mut buf = Vec::new();
        write_binary(&mut buf, 42, &sample()).unwrap();
        assert_eq!(&buf[..4], b"AMGT");
        let (seed, recs) = read_binary(&buf[..]).unwrap();
        assert_eq!(seed, 42);
        assert_eq!(recs, sample());
        buf[4] = 9;
        assert!(read_binary(&buf[..]).is_err());
    }

    #[test]
    fn file_names_carry_seed_and_hash() {
        assert_eq!(trace_file_name(7, "abcdef0123456789", "csv"), "trace_seed7_abcdef012345.csv");
    }
}
