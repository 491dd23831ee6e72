//! Logical-to-physical mapping advisor: a cost model over a measured or
//! synthetic workload profile, with exhaustive and greedy search.
//!
//! cost = alpha * max over workers of summed partition load
//!      + beta  * sum of traffic between partitions on distinct workers

use crate::error::EngineError;
use std::io::{BufRead, Write};

pub const DEFAULT_ALPHA: f64 = 1.0;
pub const DEFAULT_BETA: f64 = 0.001;

/// Exhaustive search is capped at this many logical partitions.
pub const EXHAUSTIVE_CAP: usize = 10;

/// Per-partition transaction rates plus the symmetric inter-partition
/// message matrix, both in events per second.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadProfile {
    pub load: Vec<f64>,
    pub traffic: Vec<Vec<f64>>,
}

impl WorkloadProfile {
    pub fn num_logical(&self) -> usize {
        self.load.len()
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        let n = self.load.len();
        if self.traffic.len() != n || self.traffic.iter().any(|row| row.len() != n) {
            return Err(EngineError::InvalidConfig(format!(
                "traffic matrix must be {n}x{n}"
            )));
        }
        if self.load.iter().any(|&v| v < 0.0)
            || self.traffic.iter().flatten().any(|&v| v < 0.0)
        {
            return Err(EngineError::InvalidConfig("profile entries must be >= 0".into()));
        }
        for i in 0..n {
            if self.traffic[i][i] != 0.0 {
                return Err(EngineError::InvalidConfig("traffic diagonal must be 0".into()));
            }
            for j in 0..n {
                if self.traffic[i][j] != self.traffic[j][i] {
                    return Err(EngineError::InvalidConfig("traffic must be symmetric".into()));
                }
            }
        }
        Ok(())
    }

    /// Plain-text format: first line `num_logical`, second line the load
    /// vector, then one traffic row per line.
    pub fn to_writer(&self, mut w: impl Write) -> Result<(), EngineError> {
        writeln!(w, "{}", self.num_logical())?;
        let fmt_row =
            |row: &[f64]| row.iter().map(f64::to_string).collect::<Vec<_>>().join(" ");
        writeln!(w, "{}", fmt_row(&self.load))?;
        for row in &self.traffic {
            writeln!(w, "{}", fmt_row(row))?;
        }
        Ok(())
    }

    pub fn from_reader(r: impl BufRead) -> Result<WorkloadProfile, EngineError> {
        let mut lines = r.lines();
        let mut next_line = || -> Result<String, EngineError> {
            loop {
                match lines.next() {
                    Some(line) => {
                        let line = line?;
                        if !line.trim().is_empty() {
                            return Ok(line);
                        }
                    }
                    None => return Err(EngineError::InvalidConfig("truncated profile".into())),
                }
            }
        };
        let parse_row = |line: &str| -> Result<Vec<f64>, EngineError> {
            line.split_whitespace()
                .map(|t| {
                    t.parse::<f64>().map_err(|_| {
                        EngineError::InvalidConfig(format!("bad profile number {t:?}"))
                    })
                })
                .collect()
        };
        let n: usize = next_line()?.trim().parse().map_err(|_| {
            EngineError::InvalidConfig("profile header must be the partition count".into())
        })?;
        let load = parse_row(&next_line()?)?;
        if load.len() != n {
            return Err(EngineError::InvalidConfig("load vector length mismatch".into()));
        }
        let mut traffic = Vec::with_capacity(n);
        for _ in 0..n {
            let row = parse_row(&next_line()?)?;
            if row.len() != n {
                return Err(EngineError::InvalidConfig("traffic row length mismatch".into()));
            }
            traffic.push(row);
        }
        let profile = WorkloadProfile { load, traffic };
        profile.validate()?;
        Ok(profile)
    }
}

/// A logical-to-physical assignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mapping {
    pub assign: Vec<u32>,
    pub num_physical: u32,
}

impl Mapping {
    pub fn all_on_one(num_logical: usize) -> Mapping {
        Mapping { assign: vec![0; num_logical], num_physical: 1 }
    }

    /// File format consumed by the cluster config: one `logical physical`
    /// pair per line.
    pub fn to_writer(&self, mut w: impl Write) -> Result<(), EngineError> {
        for (l, p) in self.assign.iter().enumerate() {
            writeln!(w, "{l} {p}")?;
        }
        Ok(())
    }

    pub fn from_reader(r: impl BufRead) -> Result<Mapping, EngineError> {
        let mut pairs = Vec::new();
        for line in r.lines() {
            let line = line?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut it = line.split_whitespace();
            let (l, p) = (it.next(), it.next());
            let (Some(l), Some(p)) = (l, p) else {
                return Err(EngineError::InvalidConfig(format!("bad mapping line {line:?}")));
            };
            let l: usize = l
                .parse()
                .map_err(|_| EngineError::InvalidConfig(format!("bad mapping line {line:?}")))?;
            let p: u32 = p
                .parse()
                .map_err(|_| EngineError::InvalidConfig(format!("bad mapping line {line:?}")))?;
            pairs.push((l, p));
        }
        pairs.sort_unstable();
        let mut assign = vec![u32::MAX; pairs.len()];
        for (l, p) in pairs {
            if l >= assign.len() {
                return Err(EngineError::UnmappedPartition(l as u32));
            }
            assign[l] = p;
        }
        if let Some(missing) = assign.iter().position(|&p| p == u32::MAX) {
            return Err(EngineError::UnmappedPartition(missing as u32));
        }
        let num_physical = assign.iter().copied().max().unwrap_or(0) + 1;
        Ok(Mapping { assign, num_physical })
    }
}

/// Deterministic cost of running `profile` under `mapping`.
pub fn estimate_cost(
    profile: &WorkloadProfile,
    mapping: &Mapping,
    alpha: f64,
    beta: f64,
) -> Result<f64, EngineError> {
    profile.validate()?;
    if alpha < 0.0 || beta < 0.0 {
        return Err(EngineError::InvalidConfig("cost weights must be >= 0".into()));
    }
    let n = profile.num_logical();
    if mapping.assign.len() != n {
        return Err(EngineError::InvalidConfig(format!(
            "mapping covers {} partitions, profile has {n}",
            mapping.assign.len()
        )));
    }
    if let Some(&bad) = mapping.assign.iter().find(|&&p| p >= mapping.num_physical) {
        return Err(EngineError::InvalidConfig(format!(
            "mapping assigns worker {bad} outside 0..{}",
            mapping.num_physical
        )));
    }
    let mut worker_load = vec![0.0f64; mapping.num_physical as usize];
    for (l, &p) in mapping.assign.iter().enumerate() {
        worker_load[p as usize] += profile.load[l];
    }
    let max_load = worker_load.iter().copied().fold(0.0, f64::max);
    let mut cross = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            if mapping.assign[i] != mapping.assign[j] {
                cross += profile.traffic[i][j];
            }
        }
    }
    Ok(alpha * max_load + beta * cross)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Cost-minimal assignment by full enumeration; ties break toward the
    /// lexicographically smallest assignment vector. Capped at
    /// [`EXHAUSTIVE_CAP`] logical partitions.
    Exhaustive,
    /// Partitions sorted by load descending, each placed on the worker that
    /// minimizes the incremental cost.
    Greedy,
}

pub fn advise_mapping(
    profile: &WorkloadProfile,
    num_physical: u32,
    alpha: f64,
    beta: f64,
    strategy: Strategy,
) -> Result<Mapping, EngineError> {
    profile.validate()?;
    if num_physical == 0 {
        return Err(EngineError::InvalidConfig("num_physical must be >= 1".into()));
    }
    let n = profile.num_logical();
    match strategy {
        Strategy::Exhaustive => {
            if n > EXHAUSTIVE_CAP {
                return Err(EngineError::InvalidConfig(format!(
                    "exhaustive search capped at {EXHAUSTIVE_CAP} logical partitions (got {n})"
                )));
            }
            let mut best: Option<(f64, Vec<u32>)> = None;
            let mut assign = vec![0u32; n];
            loop {
                let mapping = Mapping { assign: assign.clone(), num_physical };
                let cost = estimate_cost(profile, &mapping, alpha, beta)?;
                // Strict < keeps the first (lexicographically smallest)
                // assignment on ties: enumeration counts up from all-zeros.
                let better = match &best {
                    None => true,
                    Some((b, _)) => cost < *b,
                };
                if better {
                    best = Some((cost, assign.clone()));
                }
                // odometer increment
                let mut i = n;
                loop {
                    if i == 0 {
                        break;
                    }
                    i -= 1;
                    assign[i] += 1;
                    if assign[i] < num_physical {
                        break;
                    }
                    assign[i] = 0;
                }
                if assign.iter().all(|&a| a == 0) {
                    break;
                }
            }
            let (_, assign) = best.expect("at least one assignment");
            Ok(Mapping { assign, num_physical })
        }
        Strategy::Greedy => {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| {
                profile.load[b]
                    .partial_cmp(&profile.load[a])
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(a.cmp(&b))
            });
            let mut worker_load = vec![0.0f64; num_physical as usize];
            let mut assign = vec![u32::MAX; n];
            for &l in &order {
                let mut best_worker = 0u32;
                let mut best_cost = f64::INFINITY;
                for w in 0..num_physical {
                    // incremental cost of placing l on w given placements so far
                    let new_max = worker_load
                        .iter()
                        .enumerate()
                        .map(|(i, &wl)| if i == w as usize { wl + profile.load[l] } else { wl })
                        .fold(0.0, f64::max);
                    let mut cross = 0.0;
                    for (other, &ow) in assign.iter().enumerate() {
                        if ow != u32::MAX && ow != w {
                            cross += profile.traffic[l][other];
                        }
                    }
                    let cost = alpha * new_max + beta * cross;
                    if cost < best_cost {
                        best_cost = cost;
                        best_worker = w;
                    }
                }
                assign[l] = best_worker;
                worker_load[best_worker as usize] += profile.load[l];
            }
            Ok(Mapping { assign, num_physical })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile_two() -> WorkloadProfile {
        WorkloadProfile { load: vec![10.0, 10.0], traffic: vec![vec![0.0, 0.0], vec![0.0, 0.0]] }
    }

    #[test]
    fn hand_evaluated_cost() {
        // 2 logical, equal load 10, zero traffic, 2 workers, identity map,
        // alpha=1, beta=1 -> cost 10 (max worker load).
        let p = profile_two();
        let m = Mapping { assign: vec![0, 1], num_physical: 2 };
        assert_eq!(estimate_cost(&p, &m, 1.0, 1.0).unwrap(), 10.0);
    }

    #[test]
    fn all_on_one_worker_zeroes_cross_traffic() {
        let p = WorkloadProfile {
            load: vec![1.0, 2.0, 3.0],
            traffic: vec![
                vec![0.0, 5.0, 1.0],
                vec![5.0, 0.0, 2.0],
                vec![1.0, 2.0, 0.0],
            ],
        };
        let m = Mapping::all_on_one(3);
        // beta term is zero: cost is purely alpha * total load.
        assert_eq!(estimate_cost(&p, &m, 0.0, 1.0).unwrap(), 0.0);
        assert_eq!(estimate_cost(&p, &m, 1.0, 1.0).unwrap(), 6.0);
    }

    #[test]
    fn dominant_traffic_pair_colocates() {
        // beta >> alpha: exhaustive puts both partitions on one worker.
        // Oracle: enumerate all 2^2 mappings by hand.
        let p = WorkloadProfile {
            load: vec![10.0, 10.0],
            traffic: vec![vec![0.0, 100.0], vec![100.0, 0.0]],
        };
        let (alpha, beta) = (0.001, 10.0);
        let mut best_cost = f64::INFINITY;
        for a0 in 0..2u32 {
            for a1 in 0..2u32 {
                let m = Mapping { assign: vec![a0, a1], num_physical: 2 };
                best_cost = best_cost.min(estimate_cost(&p, &m, alpha, beta).unwrap());
            }
        }
        let advised = advise_mapping(&p, 2, alpha, beta, Strategy::Exhaustive).unwrap();
        assert_eq!(estimate_cost(&p, &advised, alpha, beta).unwrap(), best_cost);
        assert_eq!(advised.assign[0], advised.assign[1], "co-located");
    }

    #[test]
    fn uniform_partitions_split_evenly() {
        let p = WorkloadProfile {
            load: vec![5.0; 4],
            traffic: vec![vec![0.0; 4]; 4],
        };
        let m = advise_mapping(&p, 2, 1.0, 0.001, Strategy::Exhaustive).unwrap();
        let on0 = m.assign.iter().filter(|&&w| w == 0).count();
        assert_eq!(on0, 2, "2+2 split, got {:?}", m.assign);
    }

    #[test]
    fn single_worker_maps_everything_to_zero() {
        let p = profile_two();
        let m = advise_mapping(&p, 1, 1.0, 1.0, Strategy::Greedy).unwrap();
        assert_eq!(m.assign, vec![0, 0]);
    }

    #[test]
    fn exhaustive_cap_enforced() {
        let n = EXHAUSTIVE_CAP + 1;
        let p = WorkloadProfile { load: vec![1.0; n], traffic: vec![vec![0.0; n]; n] };
        assert!(advise_mapping(&p, 2, 1.0, 1.0, Strategy::Exhaustive).is_err());
    }

    #[test]
    fn relabeling_workers_preserves_cost() {
        let p = WorkloadProfile {
            load: vec![3.0, 1.0, 4.0],
            traffic: vec![
                vec![0.0, 2.0, 0.5],
                vec![2.0, 0.0, 1.5],
                vec![0.5, 1.5, 0.0],
            ],
        };
        let m = Mapping { assign: vec![0, 1, 0], num_physical: 2 };
        let relabeled = Mapping { assign: vec![1, 0, 1], num_physical: 2 };
        assert_eq!(
            estimate_cost(&p, &m, 1.0, 0.5).unwrap(),
            estimate_cost(&p, &relabeled, 1.0, 0.5).unwrap()
        );
    }

    #[test]
    fn profile_and_mapping_files_roundtrip() {
        let p = WorkloadProfile {
            load: vec![1.5, 2.0],
            traffic: vec![vec![0.0, 3.25], vec![3.25, 0.0]],
        };
        let mut buf = Vec::new();
        p.to_writer(&mut buf).unwrap();
        let back = WorkloadProfile::from_reader(buf.as_slice()).unwrap();
        assert_eq!(back, p);

        let m = Mapping { assign: vec![0, 1, 0], num_physical: 2 };
        let mut buf = Vec::new();
        m.to_writer(&mut buf).unwrap();
        let back = Mapping::from_reader(buf.as_slice()).unwrap();
        assert_eq!(back.assign, m.assign);
    }

    #[test]
    fn negative_weights_rejected() {
        let p = profile_two();
        let m = Mapping { assign: vec![0, 1], num_physical: 2 };
        assert!(estimate_cost(&p, &m, -1.0, 0.0).is_err());
        let bad = Mapping { assign: vec![0], num_physical: 2 };
        assert!(estimate_cost(&p, &bad, 1.0, 1.0).is_err());
    }
}
