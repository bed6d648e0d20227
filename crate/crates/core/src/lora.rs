//! Low-rank adapters: `W' = W + Σ wᵢ·Bᵢ·Aᵢ` over named branches.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Bound};
use crate::scalar::Scalar;
use crate::tensor::{Graph, ParamStore, Tensor, Var};

pub const DEFAULT_RANK: usize = 8;
/// Standard deviation of the `A` factor at initialization.
pub const A_INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Branch {
    Object,
    Physics,
}

impl Branch {
    pub const ALL: [Branch; 2] = [Branch::Object, Branch::Physics];

    pub fn name(self) -> &'static str {
        match self {
            Branch::Object => "object",
            Branch::Physics => "physics",
        }
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Branch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "object" => Ok(Branch::Object),
            "physics" => Ok(Branch::Physics),
            other => Err(Error::UnknownBranch(other.to_string())),
        }
    }
}

/// Which branches contribute to the forward pass, each with weight 1.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct ActiveBranches {
    pub object: bool,
    pub physics: bool,
}

impl ActiveBranches {
    pub const NONE: Self = ActiveBranches {
        object: false,
        physics: false,
    };
    pub const OBJECT: Self = ActiveBranches {
        object: true,
        physics: false,
    };
    pub const PHYSICS: Self = ActiveBranches {
        object: false,
        physics: true,
    };
    pub const BOTH: Self = ActiveBranches {
        object: true,
        physics: true,
    };

    pub fn only(branch: Branch) -> Self {
        match branch {
            Branch::Object => Self::OBJECT,
            Branch::Physics => Self::PHYSICS,
        }
    }

    pub fn contains(self, branch: Branch) -> bool {
        match branch {
            Branch::Object => self.object,
            Branch::Physics => self.physics,
        }
    }

    pub fn iter(self) -> impl Iterator<Item = Branch> {
        Branch::ALL.into_iter().filter(move |b| self.contains(*b))
    }
}

/// Resolves a branch selector by name; every named branch must be attached.
pub fn set_active<S: AsRef<str>>(names: &[S], attached: &[Branch]) -> Result<ActiveBranches> {
    let mut active = ActiveBranches::NONE;
    for n in names {
        let b: Branch = n.as_ref().parse()?;
        if !attached.contains(&b) {
            return Err(Error::UnknownBranch(b.name().to_string()));
        }
        match b {
            Branch::Object => active.object = true,
            Branch::Physics => active.physics = true,
        }
    }
    Ok(active)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub host: String,
    /// Host rows (`B` is `rows × rank`).
    pub rows: usize,
    /// Host columns (`A` is `rank × cols`).
    pub cols: usize,
    pub rank: usize,
    pub branch: Branch,
}

impl LoraAdapter {
    pub fn a_name(&self) -> String {
        format!("{}.A", self.host)
    }

    pub fn b_name(&self) -> String {
        format!("{}.B", self.host)
    }
}

/// The adapters of one branch. Parameters are held separately in a
/// [`ParamStore`] keyed `<host>.A` / `<host>.B`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LoraSet {
    pub branch: Branch,
    pub adapters: Vec<LoraAdapter>,
}

impl LoraSet {
    pub fn hosts(&self) -> impl Iterator<Item = &str> {
        self.adapters.iter().map(|a| a.host.as_str())
    }

    pub fn adapter(&self, host: &str) -> Option<&LoraAdapter> {
        self.adapters.iter().find(|a| a.host == host)
    }

    /// Number of trainable scalars in the branch.
    pub fn numel(&self) -> usize {
        self.adapters
            .iter()
            .map(|a| a.rank * (a.rows + a.cols))
            .sum()
    }
}

/// Registers a branch of adapters on `hosts` of `base`.
///
/// `B` starts at zero and `A` at N(0, 0.02²), so the merged weights equal the
/// base weights. Ranks above `min(rows, cols)` are clamped.
pub fn attach<T: Scalar, R: Rng + ?Sized>(
    base: &ParamStore<T>,
    hosts: &[String],
    rank: usize,
    branch: Branch,
    rng: &mut R,
) -> Result<(LoraSet, ParamStore<T>)> {
    let mut adapters = Vec::with_capacity(hosts.len());
    let mut params = ParamStore::new();
    for host in hosts {
        let w = base
            .get(host)
            .map_err(|_| Error::UnknownHost(host.clone()))?;
        let &[rows, cols] = w.shape() else {
            return Err(Error::NotMatrix(host.clone()));
        };
        let rank = rank.min(rows).min(cols).max(1);
        let adapter = LoraAdapter {
            host: host.clone(),
            rows,
            cols,
            rank,
            branch,
        };
        params.insert(adapter.a_name(), nn::normal(rng, &[rank, cols], A_INIT_STD));
        params.insert(adapter.b_name(), Tensor::zeros(&[rows, rank]));
        adapters.push(adapter);
    }
    Ok((LoraSet { branch, adapters }, params))
}

/// `W + Σ wᵢ·Bᵢ·Aᵢ`.
pub fn merged_weight<T: Scalar>(
    base: &Tensor<T>,
    terms: &[(&Tensor<T>, &Tensor<T>, T)],
) -> Result<Tensor<T>> {
    let &[rows, cols] = base.shape() else {
        return Err(Error::shape("merged_weight", "base is not a matrix"));
    };
    let mut out = base.clone();
    for (b, a, w) in terms {
        let (&[br, r], &[ar, ac]) = (b.shape(), a.shape()) else {
            return Err(Error::shape("merged_weight", "factors must be matrices"));
        };
        if br != rows || ar != r || ac != cols {
            return Err(Error::shape(
                "merged_weight",
                format!("W {:?}, B {:?}, A {:?}", base.shape(), b.shape(), a.shape()),
            ));
        }
        let out_data = out.data_mut();
        for i in 0..rows {
            for k in 0..r {
                let bik = b.at2(i, k) * *w;
                for j in 0..cols {
                    out_data[i * cols + j] = out_data[i * cols + j] + bik * a.at2(k, j);
                }
            }
        }
    }
    Ok(out)
}

/// Bound parameters of the branches taking part in one forward pass.
#[derive(Clone, Debug, Default)]
pub struct ActiveLoras<'a> {
    pub branches: Vec<&'a Bound>,
}

impl<'a> ActiveLoras<'a> {
    pub fn none() -> Self {
        ActiveLoras { branches: vec![] }
    }

    pub fn new(branches: Vec<&'a Bound>) -> Self {
        ActiveLoras { branches }
    }

    /// `x·W (+ Σ (x·B)·A over active branches adapting this host)`.
    pub fn project<T: Scalar>(&self, g: &Graph<T>, x: Var, w: Var, host: &str) -> Result<Var> {
        let mut y = g.matmul(x, w)?;
        for lora in &self.branches {
            let (Some(b), Some(a)) = (
                lora.try_get(&format!("{host}.B")),
                lora.try_get(&format!("{host}.A")),
            ) else {
                continue;
            };
            let xb = g.matmul(x, b)?;
            let delta = g.matmul(xb, a)?;
            y = g.add(y, delta)?;
        }
        Ok(y)
    }
}

/// Gradient of `loss` restricted to one branch, flattened in name order.
pub fn branch_grads<T: Scalar>(g: &Graph<T>, loss: Var, branch: &Bound) -> Result<Vec<T>> {
    if branch.is_empty() {
        return Err(Error::Empty("LoRA branch"));
    }
    let grads = branch.grad_vars(g, loss)?;
    Ok(nn::flat_values(g, &grads))
}
