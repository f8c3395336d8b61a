//! Data model, PV injection simulation, data pipeline and metrics for
//! appliance-state recognition and behind-the-meter injection disaggregation.

mod error;
pub mod metrics;
pub mod pipeline;
pub mod pv;
pub mod toy;
pub mod types;

pub use error::{Error, Result};
pub use types::{
    validate_household, ApplianceSpec, ApplianceTrack, AugmentedHousehold, Grid, InjectionProfile,
    PowerSeries, StateSequence, Violation,
};
