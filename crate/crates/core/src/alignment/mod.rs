//! Frozen text encoder, vocabulary table and alignment heads.

mod frozen;
mod heads;
mod vocab;

pub use frozen::{FrozenSpec, FrozenTextEncoder, TextOutput};
pub use heads::{AlignmentHead, DirectHead, HeadBuilder, HeadContext, HeadOutput, HeadRegistry, HeadSettings, RegularizedHead, VqHead};
pub use vocab::{argmax_rows, cos_matrix, reg_loss, reg_loss_grouped, vq_soft, vq_straight_through, VocabularyTable};
