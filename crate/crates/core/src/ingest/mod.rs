//! Stop-level records: parsing, trip unification, cleaning, region scoping,
//! and the synthetic network generator.

mod records;
mod synth;
mod trips;

pub use records::{parse_records, read_records, write_records, RawStopRecord, CSV_HEADER};
pub use synth::{
    generate_synthetic, GroundTruth, PrimaryDelay, PrimaryDelayMagnitude, PropagationEvent,
    SyntheticConfig, SyntheticDataset,
};
pub use trips::{
    assign_trip_ids, clean, filter_region, group_by_day, records_of, CleanStop, CleanTrip,
    CleaningConfig, CleaningReport, TripIdConfig,
};
