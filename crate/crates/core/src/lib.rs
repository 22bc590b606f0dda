// SPDX-License-Identifier: Apache-2.0

//! Token-restricted nearest-neighbor retrieval for translation decoding.
//!
//! The pipeline has two phases. Offline, every aligned source occurrence in a
//! parallel corpus is cached under its token type together with the aligned
//! target token and that target position's decoder representation
//! ([`datastore`]). Each per-type cache gets its own exact or inverted-file
//! index ([`annindex`]), optionally over product-quantized keys ([`pq`]).
//!
//! At test time each source position retrieves its `c` nearest same-type
//! occurrences ([`retrieval`]); their aligned targets form a datastore of at
//! most `c * n` entries that the beam search consults at every step
//! ([`decode`]). A vanilla mode that scans every target position of the corpus
//! is kept for cost comparison ([`bench`]).

pub mod annindex;
pub mod bench;
pub mod binio;
pub mod corpus;
pub mod datastore;
pub mod decode;
pub mod error;
pub mod exec;
pub mod kmeans;
pub mod metric;
pub mod pq;
pub mod repr;
pub mod retrieval;
pub mod synth;
pub mod toy;

pub use error::{Error, Result};
pub use exec::Exec;
pub use metric::Metric;
