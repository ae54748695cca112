//! Retrieval recall, semantic similarity, boundary quality and reports.

mod boundary;
mod recall;
mod report;
mod simi;
mod spearman;

pub use boundary::{boundary_f1, starts_f1, BoundaryScore};
pub use recall::{cosine, cosine_matrix, recall_at_k, semantic_audio_retrieval, DirectionalRecall};
pub use report::{emit_report, Report, RetrievalReport, RetrievalRow, SemanticReport, SimiCell, SimiReport, REPORT_VERSION};
pub use simi::{eval_simi, simi_score, ExtractionPoint};
pub use spearman::{average_ranks, spearman};
