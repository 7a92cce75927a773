//! Training corpus: points, condition tokens, duplication multiplicities.
//!
//! Multiplicity is carried as a weight rather than as materialized copies.
//!
//! On-disk table (CSV, one row per distinct point, header required):
//!
//! ```text
//! id,token,multiplicity,x0,x1,...,x{d-1}
//! ```
//!
//! `id` must equal the zero-based row index. Floats are written in shortest
//! round-trip form, so a write/read cycle is lossless.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, io_err, Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingCorpus {
    d: usize,
    data: Vec<f64>,
    tokens: Vec<u32>,
    multiplicity: Vec<u32>,
    watchlist: Option<Vec<usize>>,
}

impl TrainingCorpus {
    pub fn new(points: Vec<Vec<f64>>, tokens: Vec<u32>, multiplicity: Vec<u32>) -> Result<Self> {
        let n = points.len();
        if n == 0 {
            return Err(Error::Empty("corpus"));
        }
        if tokens.len() != n || multiplicity.len() != n {
            return Err(invalid("corpus", "points, tokens and multiplicities differ in length"));
        }
        let d = points[0].len();
        if d == 0 {
            return Err(invalid("corpus", "zero-dimensional points"));
        }
        let mut data = Vec::with_capacity(n * d);
        for p in &points {
            crate::schedule::check_dim(d, p.len())?;
            if !crate::vecops::all_finite(p) {
                return Err(Error::NonFinite("corpus point"));
            }
            data.extend_from_slice(p);
        }
        if multiplicity.contains(&0) {
            return Err(invalid("multiplicity", "must be at least 1"));
        }
        Ok(Self {
            d,
            data,
            tokens,
            multiplicity,
            watchlist: None,
        })
    }

    pub fn with_watchlist(mut self, ids: Vec<usize>) -> Result<Self> {
        if ids.is_empty() {
            return Err(invalid("watchlist", "empty"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.len()) {
            return Err(invalid("watchlist", format!("id {bad} out of range")));
        }
        let mut ids = ids;
        ids.sort_unstable();
        ids.dedup();
        self.watchlist = Some(ids);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn points(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks_exact(self.d)
    }

    pub fn token(&self, i: usize) -> u32 {
        self.tokens[i]
    }

    pub fn tokens(&self) -> &[u32] {
        &self.tokens
    }

    pub fn multiplicity(&self, i: usize) -> u32 {
        self.multiplicity[i]
    }

    pub fn multiplicities(&self) -> &[u32] {
        &self.multiplicity
    }

    pub fn watchlist(&self) -> Option<&[usize]> {
        self.watchlist.as_deref()
    }

    /// Total weight the denoiser sees, `sum(multiplicity)`.
    pub fn expanded_size(&self) -> u64 {
        self.multiplicity.iter().map(|&m| m as u64).sum()
    }

    pub fn ids_with_token(&self, token: u32) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.tokens[i] == token).collect()
    }

    /// Distinct tokens with their point counts, ascending by token.
    pub fn token_counts(&self) -> BTreeMap<u32, usize> {
        let mut m = BTreeMap::new();
        for &t in &self.tokens {
            *m.entry(t).or_insert(0) += 1;
        }
        m
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::Writer::from_writer(w);
        let mut header = vec!["id".to_string(), "token".into(), "multiplicity".into()];
        header.extend((0..self.d).map(|j| format!("x{j}")));
        let map = |e: csv::Error| invalid("corpus table", e.to_string());
        wr.write_record(&header).map_err(map)?;
        for i in 0..self.len() {
            let mut row = vec![
                i.to_string(),
                self.tokens[i].to_string(),
                self.multiplicity[i].to_string(),
            ];
            row.extend(self.point(i).iter().map(|v| v.to_string()));
            wr.write_record(&row).map_err(map)?;
        }
        wr.flush().map_err(|e| invalid("corpus table", e.to_string()))?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("csv is utf-8")
    }

    pub fn read_csv<R: std::io::Read>(r: R, origin: &str) -> Result<Self> {
        let perr = |reason: String| Error::Parse {
            path: origin.to_string(),
            reason,
        };
        let mut rd = csv::Reader::from_reader(r);
        let headers = rd.headers().map_err(|e| perr(e.to_string()))?.clone();
        if headers.len() < 4 || &headers[0] != "id" || &headers[1] != "token" || &headers[2] != "multiplicity" {
            return Err(perr("header must start with id,token,multiplicity and have coordinates".into()));
        }
        let (mut pts, mut toks, mut mult) = (Vec::new(), Vec::new(), Vec::new());
        for (row, rec) in rd.records().enumerate() {
            let rec = rec.map_err(|e| perr(e.to_string()))?;
            let field = |j: usize| rec.get(j).unwrap_or("").trim().to_string();
            let id: usize = field(0).parse().map_err(|_| perr(format!("row {row}: bad id")))?;
            if id != row {
                return Err(perr(format!("row {row}: id {id} is not the row index")));
            }
            toks.push(field(1).parse().map_err(|_| perr(format!("row {row}: bad token")))?);
            mult.push(field(2).parse().map_err(|_| perr(format!("row {row}: bad multiplicity")))?);
            let p: std::result::Result<Vec<f64>, _> = (3..rec.len()).map(|j| field(j).parse::<f64>()).collect();
            pts.push(p.map_err(|_| perr(format!("row {row}: bad coordinate")))?);
        }
        Self::new(pts, toks, mult)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
        Self::read_csv(f, &path.display().to_string())
    }
}

/// How the corpus points are produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Generator {
    /// Gaussian directions scaled to a fixed radius. Tokens partition space by
    /// the nearest signed axis `+e0, -e0, +e1, -e1, ...`. With `symmetric`, the
    /// second half of the points mirrors the first (`z` and `-z`), which keeps
    /// the corpus mean at the origin.
    Sphere {
        n: usize,
        d: usize,
        tokens: u32,
        radius: f64,
        #[serde(default)]
        symmetric: bool,
    },
    /// Regular grid with `side^d` points spanning `[-extent, extent]` per axis;
    /// token is `id % tokens`.
    Grid {
        side: usize,
        d: usize,
        extent: f64,
        #[serde(default = "one")]
        tokens: u32,
    },
    /// `components` centers drawn from `N(0, center_scale^2 I)`, point `i`
    /// belongs to component `i % components` with isotropic `spread`.
    GaussianMixture {
        n: usize,
        d: usize,
        components: u32,
        center_scale: f64,
        spread: f64,
    },
    /// A corpus table on disk.
    File { path: PathBuf },
}

fn one() -> u32 {
    1
}

/// Extra weight (and optionally a different token) for a single point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DuplicateRule {
    pub id: usize,
    pub multiplicity: u32,
    /// When set and different from the point's own token, the extra
    /// `multiplicity - 1` copies are appended as a separate row carrying this
    /// token: the image is duplicated under another caption.
    #[serde(default)]
    pub token: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusSpec {
    pub generator: Generator,
    #[serde(default)]
    pub seed: u64,
    /// Give one point per token this multiplicity (mirror pairs for a
    /// symmetric sphere, otherwise the lowest id of each token).
    #[serde(default)]
    pub per_token_duplicate: Option<u32>,
    #[serde(default)]
    pub duplicates: Vec<DuplicateRule>,
    #[serde(default)]
    pub watchlist: Option<Vec<usize>>,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            generator: Generator::Sphere {
                n: 256,
                d: 16,
                tokens: 8,
                radius: 4.0,
                symmetric: true,
            },
            seed: 0,
            per_token_duplicate: Some(32),
            duplicates: Vec::new(),
            watchlist: None,
        }
    }
}

impl CorpusSpec {
    pub fn dim(&self) -> Option<usize> {
        match &self.generator {
            Generator::Sphere { d, .. } | Generator::Grid { d, .. } | Generator::GaussianMixture { d, .. } => Some(*d),
            Generator::File { .. } => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.generator {
            Generator::Sphere { n, d, tokens, radius, symmetric } => {
                pos("corpus.generator.n", *n)?;
                pos("corpus.generator.d", *d)?;
                if *tokens == 0 || *tokens as usize > 2 * d {
                    return Err(invalid("corpus.generator.tokens", format!("must be in 1..={}", 2 * d)));
                }
                if !(*radius > 0.0) {
                    return Err(invalid("corpus.generator.radius", "must be positive"));
                }
                if *symmetric && (n % 2 != 0 || tokens % 2 != 0) {
                    return Err(invalid("corpus.generator", "symmetric sphere needs even n and even tokens"));
                }
            }
            Generator::Grid { side, d, extent, tokens } => {
                pos("corpus.generator.side", *side)?;
                pos("corpus.generator.d", *d)?;
                if *tokens == 0 {
                    return Err(invalid("corpus.generator.tokens", "must be positive"));
                }
                if !(*extent > 0.0) {
                    return Err(invalid("corpus.generator.extent", "must be positive"));
                }
                if (*side as f64).powi(*d as i32) > 1e7 {
                    return Err(invalid("corpus.generator", "grid too large"));
                }
            }
            Generator::GaussianMixture { n, d, components, center_scale, spread } => {
                pos("corpus.generator.n", *n)?;
                pos("corpus.generator.d", *d)?;
                if *components == 0 {
                    return Err(invalid("corpus.generator.components", "must be positive"));
                }
                if !(*center_scale >= 0.0) || !(*spread >= 0.0) {
                    return Err(invalid("corpus.generator", "scales must be non-negative"));
                }
            }
            Generator::File { .. } => {}
        }
        if self.per_token_duplicate == Some(0) {
            return Err(invalid("corpus.per_token_duplicate", "must be at least 1"));
        }
        if self.duplicates.iter().any(|r| r.multiplicity == 0) {
            return Err(invalid("corpus.duplicates", "multiplicity must be at least 1"));
        }
        Ok(())
    }
}

fn pos(field: &str, v: usize) -> Result<()> {
    if v == 0 {
        Err(invalid(field, "must be positive"))
    } else {
        Ok(())
    }
}

/// Token of `p` under the signed-axis partition with `k` anchors.
pub fn anchor_token(p: &[f64], k: u32) -> u32 {
    let mut best = (f64::NEG_INFINITY, 0u32);
    for tok in 0..k {
        let axis = (tok / 2) as usize;
        let v = if tok % 2 == 0 { p[axis] } else { -p[axis] };
        if v > best.0 {
            best = (v, tok);
        }
    }
    best.1
}

fn sphere_point(rng: &mut ChaCha8Rng, d: usize, radius: f64) -> Vec<f64> {
    loop {
        let g: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let nrm = crate::vecops::norm(&g);
        if nrm > 1e-12 {
            return g.into_iter().map(|v| v * radius / nrm).collect();
        }
    }
}

fn gm_centers(rng: &mut ChaCha8Rng, k: u32, d: usize, scale: f64) -> Vec<Vec<f64>> {
    (0..k)
        .map(|_| (0..d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect())
        .collect()
}

/// Build the corpus described by `spec`. Same spec, same corpus.
pub fn build_corpus(spec: &CorpusSpec) -> Result<TrainingCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut corpus = match &spec.generator {
        Generator::Sphere { n, d, tokens, radius, symmetric } => {
            let base = if *symmetric { n / 2 } else { *n };
            let mut pts: Vec<Vec<f64>> = (0..base).map(|_| sphere_point(&mut rng, *d, *radius)).collect();
            if *symmetric {
                let mirror: Vec<Vec<f64>> = pts.iter().map(|p| p.iter().map(|v| -v).collect()).collect();
                pts.extend(mirror);
            }
            let toks = pts.iter().map(|p| anchor_token(p, *tokens)).collect();
            let m = vec![1; pts.len()];
            TrainingCorpus::new(pts, toks, m)?
        }
        Generator::Grid { side, d, extent, tokens } => {
            let n = side.pow(*d as u32);
            let coord = |j: usize| {
                if *side == 1 {
                    0.0
                } else {
                    -extent + 2.0 * extent * j as f64 / (*side - 1) as f64
                }
            };
            let pts: Vec<Vec<f64>> = (0..n)
                .map(|i| {
                    let mut r = i;
                    (0..*d)
                        .map(|_| {
                            let j = r % side;
                            r /= side;
                            coord(j)
                        })
                        .collect()
                })
                .collect();
            let toks = (0..n).map(|i| (i as u32) % tokens).collect();
            TrainingCorpus::new(pts, toks, vec![1; n])?
        }
        Generator::GaussianMixture { n, d, components, center_scale, spread } => {
            let centers = gm_centers(&mut rng, *components, *d, *center_scale);
            let pts: Vec<Vec<f64>> = (0..*n)
                .map(|i| {
                    let c = &centers[i % *components as usize];
                    c.iter().map(|v| v + spread * rng.sample::<f64, _>(StandardNormal)).collect()
                })
                .collect();
            let toks = (0..*n).map(|i| (i as u32) % components).collect();
            TrainingCorpus::new(pts, toks, vec![1; *n])?
        }
        Generator::File { path } => TrainingCorpus::load(path)?,
    };

    if let Some(m) = spec.per_token_duplicate {
        let symmetric = matches!(spec.generator, Generator::Sphere { symmetric: true, .. });
        let half = corpus.len() / 2;
        for &tok in corpus.token_counts().keys() {
            if symmetric {
                if tok % 2 == 1 {
                    continue;
                }
                let i = (0..half)
                    .find(|&i| corpus.tokens[i] == tok)
                    .ok_or_else(|| invalid("corpus.per_token_duplicate", format!("token {tok} has no point in the base half")))?;
                corpus.multiplicity[i] = m;
                corpus.multiplicity[i + half] = m;
            } else {
                let i = corpus.tokens.iter().position(|&t| t == tok).expect("token present");
                corpus.multiplicity[i] = m;
            }
        }
    }

    let n0 = corpus.len();
    for rule in &spec.duplicates {
        if rule.id >= n0 {
            return Err(invalid("corpus.duplicates", format!("id {} out of range", rule.id)));
        }
        match rule.token {
            Some(tok) if tok != corpus.tokens[rule.id] => {
                if rule.multiplicity > 1 {
                    let p = corpus.point(rule.id).to_vec();
                    corpus.data.extend_from_slice(&p);
                    corpus.tokens.push(tok);
                    corpus.multiplicity.push(rule.multiplicity - 1);
                }
            }
            _ => corpus.multiplicity[rule.id] = rule.multiplicity,
        }
    }

    if let Some(w) = &spec.watchlist {
        corpus = corpus.with_watchlist(w.clone())?;
    }
    Ok(corpus)
}

/// Fresh draws from the corpus generator's underlying distribution (no
/// duplication), for use as a held-out reference set.
pub fn fresh_draws(spec: &CorpusSpec, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match &spec.generator {
        Generator::Sphere { d, radius, .. } => Ok((0..n).map(|_| sphere_point(&mut rng, *d, *radius)).collect()),
        Generator::GaussianMixture { d, components, center_scale, spread, .. } => {
            let mut crng = ChaCha8Rng::seed_from_u64(spec.seed);
            let centers = gm_centers(&mut crng, *components, *d, *center_scale);
            Ok((0..n)
                .map(|_| {
                    let c = &centers[rng.random_range(0..*components as usize)];
                    c.iter().map(|v| v + spread * rng.sample::<f64, _>(StandardNormal)).collect()
                })
                .collect())
        }
        _ => Err(invalid(
            "reference",
            "fresh draws need a sphere or gaussian-mixture generator; give a reference file instead",
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_spec() -> CorpusSpec {
        CorpusSpec {
            generator: Generator::Grid { side: 4, d: 2, extent: 1.0, tokens: 1 },
            seed: 0,
            per_token_duplicate: None,
            duplicates: vec![],
            watchlist: None,
        }
    }

    #[test]
    fn grid_without_duplication() {
        let c = build_corpus(&grid_spec()).unwrap();
        assert_eq!(c.len(), 16);
        assert!(c.multiplicities().iter().all(|&m| m == 1));
        let mut pts: Vec<String> = c.points().map(|p| format!("{p:?}")).collect();
        pts.sort();
        pts.dedup();
        assert_eq!(pts.len(), 16);
    }

    #[test]
    fn one_heavy_point_expanded_size() {
        let spec = CorpusSpec {
            generator: Generator::GaussianMixture { n: 1000, d: 3, components: 4, center_scale: 2.0, spread: 0.3 },
            seed: 9,
            per_token_duplicate: None,
            duplicates: vec![DuplicateRule { id: 17, multiplicity: 100, token: None }],
            watchlist: None,
        };
        let c = build_corpus(&spec).unwrap();
        assert_eq!(c.len(), 1000);
        assert_eq!(c.expanded_size(), 1099);
    }

    #[test]
    fn duplicate_under_other_caption_adds_row() {
        let mut spec = grid_spec();
        spec.generator = Generator::Grid { side: 4, d: 2, extent: 1.0, tokens: 2 };
        spec.duplicates = vec![DuplicateRule { id: 0, multiplicity: 5, token: Some(1) }];
        let c = build_corpus(&spec).unwrap();
        assert_eq!(c.len(), 17);
        assert_eq!(c.point(16), c.point(0));
        assert_eq!(c.token(0), 0);
        assert_eq!(c.token(16), 1);
        assert_eq!(c.multiplicity(16), 4);
        assert_eq!(c.expanded_size(), 16 + 4);
    }

    #[test]
    fn same_spec_same_bytes() {
        let spec = CorpusSpec::default();
        let a = build_corpus(&spec).unwrap().to_csv_string();
        let b = build_corpus(&spec).unwrap().to_csv_string();
        assert_eq!(a, b);
    }

    #[test]
    fn default_corpus_shape() {
        let c = build_corpus(&CorpusSpec::default()).unwrap();
        assert_eq!(c.len(), 256);
        assert_eq!(c.dim(), 16);
        let counts = c.token_counts();
        assert_eq!(counts.len(), 8);
        let heavy: Vec<usize> = (0..c.len()).filter(|&i| c.multiplicity(i) == 32).collect();
        assert_eq!(heavy.len(), 8);
        let mut heavy_tokens: Vec<u32> = heavy.iter().map(|&i| c.token(i)).collect();
        heavy_tokens.sort();
        assert_eq!(heavy_tokens, (0..8).collect::<Vec<_>>());
        // Weighted mean is exactly the origin.
        let mut mean = vec![0.0; 16];
        for i in 0..c.len() {
            crate::vecops::axpy(c.multiplicity(i) as f64, c.point(i), &mut mean);
        }
        assert!(crate::vecops::norm(&mean) < 1e-12);
        for p in c.points() {
            assert!((crate::vecops::norm(p) - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn csv_round_trip_is_lossless() {
        let c = build_corpus(&CorpusSpec::default()).unwrap();
        let s = c.to_csv_string();
        let back = TrainingCorpus::read_csv(s.as_bytes(), "mem").unwrap();
        assert_eq!(back, c);
        assert!(s.starts_with("id,token,multiplicity,x0,"));
    }

    #[test]
    fn csv_rejects_misnumbered_rows() {
        let s = "id,token,multiplicity,x0\n1,0,1,0.5\n";
        assert!(TrainingCorpus::read_csv(s.as_bytes(), "mem").is_err());
    }

    #[test]
    fn invalid_specs() {
        let mut s = CorpusSpec::default();
        s.per_token_duplicate = Some(0);
        assert!(build_corpus(&s).is_err());
        let mut s = CorpusSpec::default();
        s.generator = Generator::Sphere { n: 10, d: 2, tokens: 5, radius: 1.0, symmetric: false };
        assert!(build_corpus(&s).is_err());
        let mut s = grid_spec();
        s.duplicates = vec![DuplicateRule { id: 99, multiplicity: 2, token: None }];
        assert!(build_corpus(&s).is_err());
        assert!(TrainingCorpus::new(vec![vec![1.0]], vec![0], vec![0]).is_err());
        assert!(TrainingCorpus::new(vec![vec![1.0], vec![1.0, 2.0]], vec![0, 0], vec![1, 1]).is_err());
    }

    #[test]
    fn watchlist_sorted_and_checked() {
        let c = build_corpus(&grid_spec()).unwrap();
        let w = c.clone().with_watchlist(vec![5, 2, 5]).unwrap();
        assert_eq!(w.watchlist(), Some(&[2usize, 5][..]));
        assert!(c.with_watchlist(vec![16]).is_err());
    }

    #[test]
    fn fresh_draws_on_sphere() {
        let s = CorpusSpec::default();
        let r = fresh_draws(&s, 10, 3).unwrap();
        assert_eq!(r.len(), 10);
        assert!(r.iter().all(|p| (crate::vecops::norm(p) - 4.0).abs() < 1e-12));
        assert!(fresh_draws(&grid_spec(), 3, 0).is_err());
    }

    #[test]
    fn anchor_tokens_mirror() {
        let p = [0.1, -3.0, 0.2];
        assert_eq!(anchor_token(&p, 6), 3);
        let q: Vec<f64> = p.iter().map(|v| -v).collect();
        assert_eq!(anchor_token(&q, 6), 2);
    }
}
