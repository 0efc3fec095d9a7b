//! Superclient and supersample construction.
//!
//! The superclient is a `K x 2` grid of client distributions; column `V_i`
//! of row `i` participates in training and the other column is held out.
//! Each grid cell owns an `n x 2` supersample; bit `U^{i,b}_j` picks which
//! entry of row `j` is used for training.

use rand::Rng;

use crate::error::{Error, Result};
use crate::meta::{shard_partition, ClientDistribution, Instance, MetaDistribution, MetaSpec};
use crate::seed::SeedPath;

#[derive(Clone, Debug)]
pub struct SuperClientGrid {
    k: usize,
    cells: Vec<ClientDistribution>,
}

impl SuperClientGrid {
    pub fn new(k: usize, cells: Vec<ClientDistribution>) -> Result<Self> {
        if k == 0 || cells.len() != 2 * k {
            return Err(Error::structural(format!(
                "a superclient grid with K={k} needs {} cells, got {}",
                2 * k,
                cells.len()
            )));
        }
        Ok(SuperClientGrid { k, cells })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn cell(&self, i: usize, b: usize) -> &ClientDistribution {
        &self.cells[2 * i + b]
    }

    pub fn cells(&self) -> &[ClientDistribution] {
        &self.cells
    }
}

/// Instances `Z[i][b][j][c]` for a `K x 2` grid with `n` rows per cell.
#[derive(Clone, Debug, PartialEq)]
pub struct SuperSampleTensor {
    k: usize,
    n: usize,
    entries: Vec<Instance>,
    clamped: usize,
}

impl SuperSampleTensor {
    pub fn new(k: usize, n: usize, entries: Vec<Instance>) -> Result<Self> {
        if k == 0 || n == 0 || entries.len() != 4 * k * n {
            return Err(Error::structural(format!(
                "supersample tensor K={k}, n={n} needs {} entries, got {}",
                4 * k * n,
                entries.len()
            )));
        }
        Ok(SuperSampleTensor {
            k,
            n,
            entries,
            clamped: 0,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.n
    }

    fn offset(&self, i: usize, b: usize, j: usize, c: usize) -> usize {
        ((i * 2 + b) * self.n + j) * 2 + c
    }

    pub fn get(&self, i: usize, b: usize, j: usize, c: usize) -> &Instance {
        &self.entries[self.offset(i, b, j, c)]
    }

    pub fn entries(&self) -> &[Instance] {
        &self.entries
    }

    /// Number of entries that were projected back onto the domain.
    pub fn clamped_count(&self) -> usize {
        self.clamped
    }

    pub fn clamped_fraction(&self) -> f64 {
        self.clamped as f64 / self.entries.len() as f64
    }
}

/// Participation bits `v` (length K) and membership bits `u` (K x 2 x n).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SelectionAssignment {
    k: usize,
    n: usize,
    v: Vec<u8>,
    u: Vec<u8>,
}

impl SelectionAssignment {
    pub fn new(k: usize, n: usize, v: Vec<u8>, u: Vec<u8>) -> Result<Self> {
        if k == 0 || n == 0 || v.len() != k || u.len() != 2 * k * n {
            return Err(Error::structural(format!(
                "selection for K={k}, n={n} needs {k} v-bits and {} u-bits, got {} and {}",
                2 * k * n,
                v.len(),
                u.len()
            )));
        }
        if v.iter().chain(&u).any(|&bit| bit > 1) {
            return Err(Error::structural("selection bits must be 0 or 1"));
        }
        Ok(SelectionAssignment { k, n, v, u })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn v(&self, i: usize) -> usize {
        usize::from(self.v[i])
    }

    pub fn u(&self, i: usize, b: usize, j: usize) -> usize {
        usize::from(self.u[(i * 2 + b) * self.n + j])
    }

    pub fn v_bits(&self) -> &[u8] {
        &self.v
    }

    pub fn u_bits(&self) -> &[u8] {
        &self.u
    }

    /// Keeps this assignment's `u` but takes `v` from `other`.
    pub fn with_v_from(&self, other: &SelectionAssignment) -> Result<Self> {
        SelectionAssignment::new(self.k, self.n, other.v.clone(), self.u.clone())
    }

    pub fn flip_participating_u(&self) -> Self {
        let mut out = self.clone();
        for i in 0..self.k {
            let b = self.v(i);
            for j in 0..self.n {
                out.u[(i * 2 + b) * self.n + j] ^= 1;
            }
        }
        out
    }
}

pub fn build_superclient(meta: &MetaDistribution, k: usize, seed: &SeedPath) -> Result<SuperClientGrid> {
    if k == 0 {
        return Err(Error::param("K must be >= 1"));
    }
    let cells = match meta.spec() {
        MetaSpec::FixedDatasetShards {
            num_shards,
            shards_per_client,
            ..
        } => {
            let dataset = meta
                .dataset()
                .ok_or_else(|| Error::param("fixed-dataset-shards meta has no dataset"))?;
            let plan = shard_partition(dataset.labels(), *num_shards, *shards_per_client, seed)?;
            if plan.num_clients() < 2 * k {
                return Err(Error::param(format!(
                    "shard plan yields {} clients but the superclient needs 2K = {}",
                    plan.num_clients(),
                    2 * k
                )));
            }
            (0..2 * k)
                .map(|c| ClientDistribution::ShardPool {
                    pool: plan.client_pool(c),
                    dataset: dataset.clone(),
                })
                .collect()
        }
        _ => {
            let mut cells = Vec::with_capacity(2 * k);
            for i in 0..k {
                for b in 0..2 {
                    let mut rng = seed.child(i as u64).child(b as u64).rng();
                    cells.push(meta.sample_client(&mut rng)?);
                }
            }
            cells
        }
    };
    SuperClientGrid::new(k, cells)
}

pub fn build_supersamples(grid: &SuperClientGrid, n: usize, seed: &SeedPath) -> Result<SuperSampleTensor> {
    if n == 0 {
        return Err(Error::param("n must be >= 1"));
    }
    let k = grid.k();
    let mut entries = Vec::with_capacity(4 * k * n);
    let mut clamped = 0;
    for i in 0..k {
        for b in 0..2 {
            let mut rng = seed.child(i as u64).child(b as u64).rng();
            match grid.cell(i, b) {
                ClientDistribution::ShardPool { pool, dataset } => {
                    if 2 * n > pool.len() {
                        return Err(Error::param(format!(
                            "cell ({i},{b}) needs {} distinct entries but its shard pool holds {}",
                            2 * n,
                            pool.len()
                        )));
                    }
                    let picks = rand::seq::index::sample(&mut rng, pool.len(), 2 * n);
                    entries.extend(picks.iter().map(|p| dataset.instance(pool[p])));
                }
                cell => {
                    for _ in 0..2 * n {
                        let (z, was_clamped) = cell.draw(&mut rng);
                        clamped += usize::from(was_clamped);
                        entries.push(z);
                    }
                }
            }
        }
    }
    let mut tensor = SuperSampleTensor::new(k, n, entries)?;
    tensor.clamped = clamped;
    Ok(tensor)
}

pub fn draw_selection(k: usize, n: usize, seed: &SeedPath) -> Result<SelectionAssignment> {
    if k == 0 || n == 0 {
        return Err(Error::param("K and n must be >= 1"));
    }
    let mut rv = seed.tag("v").rng();
    let mut ru = seed.tag("u").rng();
    let v = (0..k).map(|_| u8::from(rv.random::<bool>())).collect();
    let u = (0..2 * k * n).map(|_| u8::from(ru.random::<bool>())).collect();
    SelectionAssignment::new(k, n, v, u)
}

fn check_shapes(z: &SuperSampleTensor, a: &SelectionAssignment) -> Result<()> {
    if z.k() != a.k() || z.n() != a.n() {
        return Err(Error::structural(format!(
            "tensor is K={}, n={} but selection is K={}, n={}",
            z.k(),
            z.n(),
            a.k(),
            a.n()
        )));
    }
    Ok(())
}

/// `S_i = { Z[i][v_i][j][u^{i,v_i}_j] : j in 0..n }`, in row order.
pub fn materialize_training_sets(z: &SuperSampleTensor, a: &SelectionAssignment) -> Result<Vec<Vec<Instance>>> {
    check_shapes(z, a)?;
    Ok((0..z.k())
        .map(|i| {
            let b = a.v(i);
            (0..z.n()).map(|j| z.get(i, b, j, a.u(i, b, j)).clone()).collect()
        })
        .collect())
}

/// The complementary held-out column of each participating cell.
pub fn materialize_test_sets(z: &SuperSampleTensor, a: &SelectionAssignment) -> Result<Vec<Vec<Instance>>> {
    check_shapes(z, a)?;
    Ok((0..z.k())
        .map(|i| {
            let b = a.v(i);
            (0..z.n()).map(|j| z.get(i, b, j, 1 - a.u(i, b, j)).clone()).collect()
        })
        .collect())
}
