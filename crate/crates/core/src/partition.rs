//! Shard assignment: round-robin degradation types, Dirichlet-skewed
//! per-type image counts with largest-remainder rounding, and the
//! average-linkage clustering used to group benchmark result rows.

use serde::{Deserialize, Serialize};

use crate::degrade::DegradationType;
use crate::error::{Error, Result};
use crate::rng::{derive_stream, RngStream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirichletParams {
    pub alpha: Vec<f64>,
}

impl Default for DirichletParams {
    fn default() -> Self {
        DirichletParams { alpha: vec![0.5; 4] }
    }
}

/// Where the per-type proportions come from.
#[derive(Debug, Clone, PartialEq)]
pub enum ProportionSource {
    Uniform,
    Dirichlet(DirichletParams),
    Fixed(Vec<f64>),
}

/// Named proportion presets over [Clean, Blur, Noise, Jpeg]; shapes of
/// the recommended training distributions, overridable via config.
pub const PROPORTION_PRESETS: [(&str, [f64; 4]); 5] = [
    ("few_clean_or_blur", [0.05, 0.05, 0.45, 0.45]),
    ("few_noise", [0.3, 0.3, 0.05, 0.35]),
    ("few_jpeg", [0.3, 0.3, 0.35, 0.05]),
    ("few_jpeg_many_noise", [0.2, 0.2, 0.55, 0.05]),
    ("few_clean_many_blur", [0.05, 0.55, 0.2, 0.2]),
];

pub fn proportion_preset(name: &str) -> Option<Vec<f64>> {
    PROPORTION_PRESETS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, p)| p.to_vec())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientShard {
    pub id: usize,
    #[serde(rename = "type")]
    pub degradation_type: DegradationType,
    pub image_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionPlan {
    pub master_seed: u64,
    pub proportions: Vec<f64>,
    pub clients: Vec<ClientShard>,
}

impl PartitionPlan {
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &std::path::Path) -> Result<PartitionPlan> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

/// Normalized Gamma variates; the Dirichlet normalizer is never
/// evaluated. Entries are positive and sum to 1.
pub fn sample_dirichlet(params: &DirichletParams, rng: &mut RngStream) -> Result<Vec<f64>> {
    if params.alpha.is_empty() || params.alpha.iter().any(|&a| a <= 0.0) {
        return Err(Error::invalid_argument(
            "dirichlet: all concentrations must be positive",
        ));
    }
    let gammas: Vec<f64> = params.alpha.iter().map(|&a| rng.gamma(a)).collect();
    let sum: f64 = gammas.iter().sum();
    Ok(gammas.iter().map(|g| g / sum).collect())
}

/// Client i gets type (i mod 4) in the fixed order
/// [Clean, Blur, Noise, Jpeg].
pub fn assign_degradation_types(num_clients: usize) -> Vec<DegradationType> {
    (0..num_clients)
        .map(|i| DegradationType::ALL[i % 4])
        .collect()
}

/// Largest-remainder rounding of proportions * total to integer counts.
fn largest_remainder_counts(proportions: &[f64], total: usize) -> Vec<usize> {
    let targets: Vec<f64> = proportions.iter().map(|p| p * total as f64).collect();
    let mut counts: Vec<usize> = targets.iter().map(|t| t.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..proportions.len()).collect();
    // by descending fractional remainder, ties to the lowest index
    order.sort_by(|&a, &b| {
        let ra = targets[a] - targets[a].floor();
        let rb = targets[b] - targets[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for i in 0..total - assigned {
        counts[order[i % order.len()]] += 1;
    }
    counts
}

/// Shuffles the ids, splits them into per-type blocks by the rounded
/// proportions, then splits each block evenly among that type's clients
/// (remainder to the lowest client id).
pub fn build_partition(
    image_ids: &[String],
    num_clients: usize,
    source: &ProportionSource,
    master_seed: u64,
) -> Result<PartitionPlan> {
    if num_clients == 0 {
        return Err(Error::invalid_argument("partition: need at least one client"));
    }
    if image_ids.len() < num_clients {
        return Err(Error::invalid_argument(format!(
            "partition: {} images cannot cover {num_clients} clients",
            image_ids.len()
        )));
    }
    let mut rng = derive_stream(master_seed, "partition");
    let mut ids = image_ids.to_vec();
    rng.shuffle(&mut ids);

    let proportions = match source {
        ProportionSource::Uniform => vec![0.25; 4],
        ProportionSource::Dirichlet(params) => {
            if params.alpha.len() != 4 {
                return Err(Error::invalid_argument(
                    "partition: dirichlet needs exactly 4 concentrations",
                ));
            }
            sample_dirichlet(params, &mut rng)?
        }
        ProportionSource::Fixed(p) => {
            if p.len() != 4 || p.iter().any(|&v| v < 0.0) {
                return Err(Error::invalid_argument(
                    "partition: fixed proportions must be 4 non-negative values",
                ));
            }
            let sum: f64 = p.iter().sum();
            if sum <= 0.0 {
                return Err(Error::invalid_argument("partition: proportions sum to zero"));
            }
            p.iter().map(|v| v / sum).collect()
        }
    };

    let type_counts = largest_remainder_counts(&proportions, ids.len());
    let types = assign_degradation_types(num_clients);
    let mut clients: Vec<ClientShard> = types
        .iter()
        .enumerate()
        .map(|(id, &ty)| ClientShard {
            id,
            degradation_type: ty,
            image_ids: Vec::new(),
        })
        .collect();

    let mut cursor = 0usize;
    for (ti, &ty) in DegradationType::ALL.iter().enumerate() {
        let block = &ids[cursor..cursor + type_counts[ti]];
        cursor += type_counts[ti];
        let members: Vec<usize> = clients
            .iter()
            .filter(|c| c.degradation_type == ty)
            .map(|c| c.id)
            .collect();
        if members.is_empty() {
            continue;
        }
        if block.is_empty() {
            return Err(Error::InfeasiblePartition {
                degradation_type: ty.name().to_string(),
            });
        }
        let per = block.len() / members.len();
        let rem = block.len() % members.len();
        let mut offset = 0;
        for (mi, &cid) in members.iter().enumerate() {
            let take = per + usize::from(mi < rem);
            clients[cid]
                .image_ids
                .extend_from_slice(&block[offset..offset + take]);
            offset += take;
        }
    }

    if let Some(empty) = clients.iter().find(|c| c.image_ids.is_empty()) {
        return Err(Error::InfeasiblePartition {
            degradation_type: empty.degradation_type.name().to_string(),
        });
    }
    Ok(PartitionPlan {
        master_seed,
        proportions,
        clients,
    })
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Agglomerative clustering with average linkage (UPGMA) on Euclidean
/// distances; merge ties go to the lowest (i, j) pair. Returns one label
/// per row; the cluster containing the earliest row gets the smallest
/// label.
pub fn cluster_result_rows(rows: &[Vec<f64>], k: usize) -> Result<Vec<usize>> {
    if k < 1 {
        return Err(Error::invalid_argument("cluster: k must be >= 1"));
    }
    let n = rows.len();
    if k > n {
        return Err(Error::invalid_argument(format!(
            "cluster: k={k} exceeds row count {n}"
        )));
    }
    if rows.iter().any(|r| r.len() != rows[0].len()) {
        return Err(Error::invalid_argument("cluster: ragged rows"));
    }

    // clusters as sorted member lists; UPGMA via Lance-Williams update
    let mut members: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let mut dist: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| euclidean(&rows[i], &rows[j])).collect())
        .collect();
    let mut alive: Vec<bool> = vec![true; n];
    let mut remaining = n;

    while remaining > k {
        let mut best: Option<(usize, usize, f64)> = None;
        for i in 0..n {
            if !alive[i] {
                continue;
            }
            for j in i + 1..n {
                if !alive[j] {
                    continue;
                }
                let d = dist[i][j];
                match best {
                    Some((_, _, bd)) if d >= bd => {}
                    _ => best = Some((i, j, d)),
                }
            }
        }
        let (i, j, _) = best.expect("at least two clusters alive");
        let (ni, nj) = (members[i].len() as f64, members[j].len() as f64);
        for t in 0..n {
            if !alive[t] || t == i || t == j {
                continue;
            }
            let d = (ni * dist[i][t] + nj * dist[j][t]) / (ni + nj);
            dist[i][t] = d;
            dist[t][i] = d;
        }
        let moved = std::mem::take(&mut members[j]);
        members[i].extend(moved);
        members[i].sort_unstable();
        alive[j] = false;
        remaining -= 1;
    }

    // label clusters in order of their smallest member index
    let mut clusters: Vec<&Vec<usize>> = (0..n).filter(|&i| alive[i]).map(|i| &members[i]).collect();
    clusters.sort_by_key(|m| m[0]);
    let mut labels = vec![0usize; n];
    for (label, cluster) in clusters.iter().enumerate() {
        for &row in cluster.iter() {
            labels[row] = label;
        }
    }
    Ok(labels)
}
