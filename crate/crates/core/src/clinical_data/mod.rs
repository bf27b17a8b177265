//! Ingestion and preparation of clinical records.

pub mod audiogram;
pub mod categorize;
pub mod ingest;
pub mod record;

pub use audiogram::{compute_pta, impute_audiogram, Audiogram, HlToSpl, PartialAudiogram, FREQUENCIES};
pub use categorize::{categorize, dedup_audiograms, dedup_records, Categorization, SlopeCategory};
pub use ingest::{ingest, ingest_reader, select_better_ears, write_csv, IngestReport, InputFormat, RawRow, CSV_HEADER};
pub use record::{
    select_better_ear, Ear, PatientRecord, SpeechMeasurement, SpeechPoint, TieBreak, SPEECH_LEVELS, WRS_STEP,
};
