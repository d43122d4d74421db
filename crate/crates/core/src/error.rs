use thiserror::Error;

use crate::sensitivity::AllocationState;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("invalid machine: {0}")]
    InvalidMachine(String),

    #[error("state ({}, {}%) is outside the profiled range", .0.llc_ways, .0.mba_percent)]
    StateOutOfBounds(AllocationState),

    #[error("invalid profile: {0}")]
    InvalidProfile(String),

    #[error("invalid input: {0}")]
    Domain(String),

    #[error("infeasible SLO: {0}")]
    InfeasibleSlo(String),

    #[error("non-monotone capacity model at ({}, {}%)", .0.llc_ways, .0.mba_percent)]
    NonMonotone(AllocationState),

    #[error("invalid CLOS set: {0}")]
    InvalidClosSet(String),

    #[error("epoch underflow: clos {clos} has {members} members but the epoch has {epoch_quanta} quanta")]
    EpochUnderflow { clos: u8, members: usize, epoch_quanta: u32 },

    #[error("invalid scenario: {0}")]
    InvalidScenario(String),

    #[error("infeasible: {0}")]
    Infeasible(String),
}
