//! Integer resource vectors shared by templates, schedulers and sites.

use std::fmt;
use std::iter::Sum;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Demand or capacity expressed as whole cpus, megabytes of memory and gigabytes of disk.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ResourceVector {
    pub cpus: u64,
    pub mem_mb: u64,
    pub disk_gb: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("resource underflow: {lhs} - {rhs}")]
pub struct ResourceUnderflow {
    pub lhs: ResourceVector,
    pub rhs: ResourceVector,
}

impl ResourceVector {
    pub const ZERO: ResourceVector = ResourceVector { cpus: 0, mem_mb: 0, disk_gb: 0 };

    pub const fn new(cpus: u64, mem_mb: u64, disk_gb: u64) -> Self {
        Self { cpus, mem_mb, disk_gb }
    }

    pub fn is_zero(&self) -> bool {
        *self == Self::ZERO
    }

    /// True when at least one component is strictly positive.
    pub fn any_positive(&self) -> bool {
        !self.is_zero()
    }

    /// True iff every component of `self` is at most the matching component of `capacity`.
    pub fn fits(&self, capacity: &ResourceVector) -> bool {
        self.cpus <= capacity.cpus && self.mem_mb <= capacity.mem_mb && self.disk_gb <= capacity.disk_gb
    }

    pub fn checked_sub(&self, rhs: &ResourceVector) -> Result<ResourceVector, ResourceUnderflow> {
        match (
            self.cpus.checked_sub(rhs.cpus),
            self.mem_mb.checked_sub(rhs.mem_mb),
            self.disk_gb.checked_sub(rhs.disk_gb),
        ) {
            (Some(cpus), Some(mem_mb), Some(disk_gb)) => Ok(ResourceVector { cpus, mem_mb, disk_gb }),
            _ => Err(ResourceUnderflow { lhs: *self, rhs: *rhs }),
        }
    }

    pub fn saturating_sub(&self, rhs: &ResourceVector) -> ResourceVector {
        ResourceVector {
            cpus: self.cpus.saturating_sub(rhs.cpus),
            mem_mb: self.mem_mb.saturating_sub(rhs.mem_mb),
            disk_gb: self.disk_gb.saturating_sub(rhs.disk_gb),
        }
    }

    pub fn scale(&self, factor: u64) -> ResourceVector {
        ResourceVector { cpus: self.cpus * factor, mem_mb: self.mem_mb * factor, disk_gb: self.disk_gb * factor }
    }

    pub fn components(&self) -> [u64; 3] {
        [self.cpus, self.mem_mb, self.disk_gb]
    }
}

impl Add for ResourceVector {
    type Output = ResourceVector;

    fn add(self, rhs: ResourceVector) -> ResourceVector {
        ResourceVector {
            cpus: self.cpus + rhs.cpus,
            mem_mb: self.mem_mb + rhs.mem_mb,
            disk_gb: self.disk_gb + rhs.disk_gb,
        }
    }
}

impl AddAssign for ResourceVector {
    fn add_assign(&mut self, rhs: ResourceVector) {
        *self = *self + rhs;
    }
}

impl Sum for ResourceVector {
    fn sum<I: Iterator<Item = ResourceVector>>(iter: I) -> Self {
        iter.fold(ResourceVector::ZERO, Add::add)
    }
}

impl<'a> Sum<&'a ResourceVector> for ResourceVector {
    fn sum<I: Iterator<Item = &'a ResourceVector>>(iter: I) -> Self {
        iter.copied().sum()
    }
}

impl fmt::Display for ResourceVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({},{},{})", self.cpus, self.mem_mb, self.disk_gb)
    }
}
