//! The eleven tracked non-pharmaceutical interventions.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub const NPI_COUNT: usize = 11;

/// Index order is fixed; every 11-vector in the crate uses it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Npi {
    School,
    Workplace,
    Events,
    Gatherings,
    Transit,
    StayHome,
    InternalMovement,
    InfoCampaigns,
    Testing,
    Tracing,
    Masks,
}

impl Npi {
    pub const ALL: [Npi; NPI_COUNT] = [
        Npi::School,
        Npi::Workplace,
        Npi::Events,
        Npi::Gatherings,
        Npi::Transit,
        Npi::StayHome,
        Npi::InternalMovement,
        Npi::InfoCampaigns,
        Npi::Testing,
        Npi::Tracing,
        Npi::Masks,
    ];

    /// The six measures priced together as "social distancing".
    pub const DISTANCING: [Npi; 6] = [
        Npi::StayHome,
        Npi::Gatherings,
        Npi::InternalMovement,
        Npi::InfoCampaigns,
        Npi::Transit,
        Npi::Events,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Npi::School => "school",
            Npi::Workplace => "workplace",
            Npi::Events => "events",
            Npi::Gatherings => "gatherings",
            Npi::Transit => "transit",
            Npi::StayHome => "stay_home",
            Npi::InternalMovement => "internal_movement",
            Npi::InfoCampaigns => "info_campaigns",
            Npi::Testing => "testing",
            Npi::Tracing => "tracing",
            Npi::Masks => "masks",
        }
    }
}

impl fmt::Display for Npi {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Npi {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Npi::ALL
            .iter()
            .copied()
            .find(|n| n.name() == s)
            .ok_or_else(|| format!("unknown NPI '{s}'"))
    }
}

/// One week of policy strengths, indexed by [`Npi::index`].
pub type PolicyVector = [f64; NPI_COUNT];
