//! Synthetic cohorts, the binary array container and batching.

pub mod batch;
pub mod cohort;
pub mod container;

pub use batch::{batch_iter, pool_subject, Batch, PooledCohort, PooledSubject, Split};
pub use cohort::{generate_cohort, subject_name, Cohort, CohortSpec, SubjectData};
pub use container::{load_container, save_container, ArrayData, NamedArray};
