//! Synthetic low-dimensional IV scenarios, outcome standardization,
//! Dirichlet client partitioning and CSV persistence.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeds::derive_seed;

/// Structural function `g0`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseKind {
    Absolute,
    Step,
    Linear,
}

impl ResponseKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ResponseKind::Absolute => "absolute",
            ResponseKind::Step => "step",
            ResponseKind::Linear => "linear",
        }
    }
}

impl std::str::FromStr for ResponseKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "absolute" => Ok(Self::Absolute),
            "step" => Ok(Self::Step),
            "linear" => Ok(Self::Linear),
            other => Err(format!("unknown response `{other}`")),
        }
    }
}

pub fn true_response(response: ResponseKind, x: f64) -> f64 {
    match response {
        ResponseKind::Absolute => x.abs(),
        ResponseKind::Step => {
            if x >= 0.0 {
                1.0
            } else {
                0.0
            }
        }
        ResponseKind::Linear => x,
    }
}

/// How the second argument of `N(0, s)` in the generating process is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseReading {
    #[default]
    Variance,
    Std,
}

impl NoiseReading {
    pub fn std_dev(self, param: f64) -> f64 {
        match self {
            NoiseReading::Variance => param.sqrt(),
            NoiseReading::Std => param,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub response: ResponseKind,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
    #[serde(default)]
    pub noise_second_param: NoiseReading,
}

impl ScenarioSpec {
    pub fn new(response: ResponseKind, n: usize, seed: u64) -> Self {
        Self {
            response,
            n_train: n,
            n_val: n,
            n_test: n,
            seed,
            noise_second_param: NoiseReading::Variance,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, n) in [
            ("scenario.n_train", self.n_train),
            ("scenario.n_val", self.n_val),
            ("scenario.n_test", self.n_test),
        ] {
            if n == 0 {
                return Err(Error::config(name, "must be at least 1"));
            }
        }
        Ok(())
    }
}

/// One split of `(x, y, z)` triples. `y_mean`/`y_std` record the outcome
/// standardization (`0`/`1` until [`standardize_y`] is applied).
#[derive(Debug, Clone, PartialEq)]
pub struct IvDataset {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<[f64; 2]>,
    pub y_mean: f64,
    pub y_std: f64,
}

impl IvDataset {
    pub fn new(x: Vec<f64>, y: Vec<f64>, z: Vec<[f64; 2]>) -> Result<Self> {
        if y.len() != x.len() {
            return Err(Error::DimensionMismatch {
                what: "dataset y rows",
                expected: x.len(),
                got: y.len(),
            });
        }
        if z.len() != x.len() {
            return Err(Error::DimensionMismatch {
                what: "dataset z rows",
                expected: x.len(),
                got: z.len(),
            });
        }
        Ok(Self {
            x,
            y,
            z,
            y_mean: 0.0,
            y_std: 1.0,
        })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Maps a value in standardized outcome units back to original units.
    pub fn to_original(&self, v: f64) -> f64 {
        v * self.y_std + self.y_mean
    }

    /// Outcomes in original units.
    pub fn original_y(&self) -> Vec<f64> {
        self.y.iter().map(|&v| self.to_original(v)).collect()
    }
}

/// One client's private data. `indices` are positions in the source split.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard {
    pub client_id: usize,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<[f64; 2]>,
    pub indices: Vec<usize>,
}

impl ClientShard {
    pub fn from_indices(client_id: usize, ds: &IvDataset, indices: Vec<usize>) -> Self {
        Self {
            client_id,
            x: indices.iter().map(|&i| ds.x[i]).collect(),
            y: indices.iter().map(|&i| ds.y[i]).collect(),
            z: indices.iter().map(|&i| ds.z[i]).collect(),
            indices,
        }
    }

    /// The whole split as a single client.
    pub fn whole(client_id: usize, ds: &IvDataset) -> Self {
        Self::from_indices(client_id, ds, (0..ds.len()).collect())
    }

    pub fn n(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    /// Rows at the given shard-local positions, in that order.
    pub fn select(&self, positions: &[usize]) -> Self {
        Self {
            client_id: self.client_id,
            x: positions.iter().map(|&p| self.x[p]).collect(),
            y: positions.iter().map(|&p| self.y[p]).collect(),
            z: positions.iter().map(|&p| self.z[p]).collect(),
            indices: positions.iter().map(|&p| self.indices[p]).collect(),
        }
    }

    pub fn with_client_id(mut self, client_id: usize) -> Self {
        self.client_id = client_id;
        self
    }
}

const Z_HALF_WIDTH: f64 = 3.0;
const CONFOUNDER_PARAM: f64 = 1.0;
const SMALL_NOISE_PARAM: f64 = 0.1;

fn draw_split(response: ResponseKind, n: usize, noise: NoiseReading, seed: u64) -> IvDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z_dist = Uniform::new_inclusive(-Z_HALF_WIDTH, Z_HALF_WIDTH).unwrap();
    let e_dist = Normal::new(0.0, noise.std_dev(CONFOUNDER_PARAM)).unwrap();
    let small = Normal::new(0.0, noise.std_dev(SMALL_NOISE_PARAM)).unwrap();
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    let mut z = Vec::with_capacity(n);
    for _ in 0..n {
        let z1 = z_dist.sample(&mut rng);
        let z2 = z_dist.sample(&mut rng);
        // e enters both X and Y: the source of endogeneity.
        let e = e_dist.sample(&mut rng);
        let gamma = small.sample(&mut rng);
        let delta = small.sample(&mut rng);
        let xi = z1 + z2 + e + gamma;
        x.push(xi);
        y.push(true_response(response, xi) + e + delta);
        z.push([z1, z2]);
    }
    IvDataset {
        x,
        y,
        z,
        y_mean: 0.0,
        y_std: 1.0,
    }
}

/// Draws the train, validation and test splits, each from its own derived
/// RNG stream.
pub fn generate(spec: &ScenarioSpec) -> Result<(IvDataset, IvDataset, IvDataset)> {
    spec.validate()?;
    let noise = spec.noise_second_param;
    Ok((
        draw_split(spec.response, spec.n_train, noise, derive_seed(spec.seed, &[0x7472, 0])),
        draw_split(spec.response, spec.n_val, noise, derive_seed(spec.seed, &[0x7472, 1])),
        draw_split(spec.response, spec.n_test, noise, derive_seed(spec.seed, &[0x7472, 2])),
    ))
}

/// Mean and population standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn apply_standardization(ds: &IvDataset, mean: f64, std: f64) -> IvDataset {
    // Compose with any transform already applied so `to_original` stays exact.
    IvDataset {
        x: ds.x.clone(),
        y: ds.y.iter().map(|y| (y - mean) / std).collect(),
        z: ds.z.clone(),
        y_mean: ds.y_mean + ds.y_std * mean,
        y_std: ds.y_std * std,
    }
}

/// Standardizes `y` in all three splits with the train statistics.
pub fn standardize_y(
    train: &IvDataset,
    val: &IvDataset,
    test: &IvDataset,
) -> Result<(IvDataset, IvDataset, IvDataset)> {
    if train.is_empty() {
        return Err(Error::EmptyShard);
    }
    let (mean, std) = mean_std(&train.y);
    if !(std >= 1e-12) {
        return Err(Error::DegenerateOutcome(std));
    }
    Ok((
        apply_standardization(train, mean, std),
        apply_standardization(val, mean, std),
        apply_standardization(test, mean, std),
    ))
}

const MAX_PARTITION_REDRAWS: usize = 100;

fn try_partition(n: usize, n_clients: usize, alpha: f64, seed: u64) -> Option<Vec<Vec<usize>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let proportions: Vec<f64> = if n_clients == 1 {
        vec![1.0]
    } else {
        // Dir(alpha * 1) as normalized Gamma(alpha, 1) draws; the
        // normalization happens through `acc` below.
        let gamma = Gamma::new(alpha, 1.0).ok()?;
        (0..n_clients).map(|_| gamma.sample(&mut rng)).collect()
    };
    if proportions.iter().any(|p| !p.is_finite()) {
        return None;
    }
    let mut cumulative = Vec::with_capacity(n_clients);
    let mut acc = 0.0;
    for p in &proportions {
        acc += p;
        cumulative.push(acc);
    }
    if !(acc > 0.0) {
        return None;
    }
    let mut buckets = vec![Vec::new(); n_clients];
    for i in 0..n {
        let u = rng.random::<f64>() * acc;
        let client = cumulative
            .iter()
            .position(|&c| u < c)
            .unwrap_or(n_clients - 1);
        buckets[client].push(i);
    }
    if buckets.iter().any(Vec::is_empty) {
        None
    } else {
        Some(buckets)
    }
}

/// Non-i.i.d. split: proportions `p ~ Dir(alpha * 1_N)`, each sample sent
/// to client `i` with probability `p_i`. A draw that leaves a client empty
/// is redrawn from a derived seed.
pub fn dirichlet_partition(
    ds: &IvDataset,
    n_clients: usize,
    alpha: f64,
    seed: u64,
) -> Result<Vec<ClientShard>> {
    if n_clients == 0 {
        return Err(Error::config("data.n_clients", "must be at least 1"));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::config("data.alpha", format!("must be positive, got {alpha}")));
    }
    if ds.len() < n_clients {
        return Err(Error::PartitionRetries(0));
    }
    for attempt in 0..=MAX_PARTITION_REDRAWS {
        let attempt_seed = if attempt == 0 {
            seed
        } else {
            derive_seed(seed, &[0x6469_7269, attempt as u64])
        };
        if let Some(buckets) = try_partition(ds.len(), n_clients, alpha, attempt_seed) {
            return Ok(buckets
                .into_iter()
                .enumerate()
                .map(|(id, idx)| ClientShard::from_indices(id, ds, idx))
                .collect());
        }
    }
    Err(Error::PartitionRetries(MAX_PARTITION_REDRAWS))
}

/// Formats like C's `%.17g`.
pub fn fmt_g17(v: f64) -> String {
    if v == 0.0 {
        return if v.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    if !v.is_finite() {
        return format!("{v}");
    }
    let sci = format!("{v:.16e}");
    let (mantissa, exp) = sci.split_once('e').unwrap();
    let exp: i32 = exp.parse().unwrap();
    if !(-4..17).contains(&exp) {
        let mantissa = trim_zeros(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        return format!("{mantissa}e{sign}{:02}", exp.abs());
    }
    let decimals = (16 - exp).max(0) as usize;
    trim_zeros(&format!("{v:.decimals$}")).to_string()
}

fn trim_zeros(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

const CSV_HEADER: &str = "x,y,z1,z2";

fn rows_to_csv(x: &[f64], y: &[f64], z: &[[f64; 2]]) -> String {
    let mut out = String::with_capacity(x.len() * 80);
    out.push_str(CSV_HEADER);
    out.push('\n');
    for i in 0..x.len() {
        let _ = writeln!(
            out,
            "{},{},{},{}",
            fmt_g17(x[i]),
            fmt_g17(y[i]),
            fmt_g17(z[i][0]),
            fmt_g17(z[i][1])
        );
    }
    out
}

type Rows = (Vec<f64>, Vec<f64>, Vec<[f64; 2]>);

fn parse_csv(path: &Path) -> Result<Rows> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    let bad = |message: String| Error::Parse {
        path: path.to_path_buf(),
        message,
    };
    match lines.next() {
        Some(h) if h.trim() == CSV_HEADER => {}
        other => return Err(bad(format!("expected header `{CSV_HEADER}`, got {other:?}"))),
    }
    let (mut x, mut y, mut z) = (Vec::new(), Vec::new(), Vec::new());
    for (lineno, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<f64> = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| bad(format!("line {}: {e}", lineno + 2)))?;
        if fields.len() != 4 {
            return Err(bad(format!("line {}: expected 4 fields", lineno + 2)));
        }
        x.push(fields[0]);
        y.push(fields[1]);
        z.push([fields[2], fields[3]]);
    }
    Ok((x, y, z))
}

/// Sidecar describing how a persisted dataset was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub scenario: ScenarioSpec,
    pub y_mean: f64,
    pub y_std: f64,
    pub n_clients: Option<usize>,
    pub alpha: Option<f64>,
    pub partition_seed: Option<u64>,
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Writes `<name>.{train,val,test}.csv` and `<name>.meta.json` into `dir`.
pub fn save_splits(
    dir: &Path,
    name: &str,
    splits: (&IvDataset, &IvDataset, &IvDataset),
    meta: &DatasetMeta,
) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (split, ds) in [("train", splits.0), ("val", splits.1), ("test", splits.2)] {
        write_file(
            &dir.join(format!("{name}.{split}.csv")),
            &rows_to_csv(&ds.x, &ds.y, &ds.z),
        )?;
    }
    write_file(
        &dir.join(format!("{name}.meta.json")),
        &serde_json::to_string_pretty(meta)?,
    )
}

/// Writes one `<name>.client<k>.csv` per shard.
pub fn save_shards(dir: &Path, name: &str, shards: &[ClientShard]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for shard in shards {
        write_file(
            &dir.join(format!("{name}.client{}.csv", shard.client_id)),
            &rows_to_csv(&shard.x, &shard.y, &shard.z),
        )?;
    }
    Ok(())
}

pub fn load_meta(dir: &Path, name: &str) -> Result<DatasetMeta> {
    let path = dir.join(format!("{name}.meta.json"));
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Loads one persisted split; standardization constants come from the
/// sidecar.
pub fn load_split(dir: &Path, name: &str, split: &str) -> Result<IvDataset> {
    let meta = load_meta(dir, name)?;
    let (x, y, z) = parse_csv(&dir.join(format!("{name}.{split}.csv")))?;
    let mut ds = IvDataset::new(x, y, z)?;
    ds.y_mean = meta.y_mean;
    ds.y_std = meta.y_std;
    Ok(ds)
}

/// Loads `<name>.client0.csv`, `<name>.client1.csv`, ... until one is missing.
pub fn load_shards(dir: &Path, name: &str) -> Result<Vec<ClientShard>> {
    let mut shards = Vec::new();
    loop {
        let path = dir.join(format!("{name}.client{}.csv", shards.len()));
        if !path.exists() {
            break;
        }
        let (x, y, z) = parse_csv(&path)?;
        let n = x.len();
        shards.push(ClientShard {
            client_id: shards.len(),
            x,
            y,
            z,
            indices: (0..n).collect(),
        });
    }
    if shards.is_empty() {
        return Err(Error::NoShards);
    }
    Ok(shards)
}
