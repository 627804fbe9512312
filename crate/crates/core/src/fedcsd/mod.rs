//! Class-prototype similarity distillation: prototype exchange, similarity
//! weighted teacher logits, soft-label masks and the masked distillation
//! loss, plus the local-training strategy built from them.

mod loss;
mod mask;
mod prototype;
mod similarity;
mod train;

pub use loss::{csd_loss, DistillBatchView};
pub use mask::{adaptive_mask, forcible_mask, MaskKind};
pub use prototype::{aggregate_prototypes, local_prototype, PrototypeMatrix, PrototypeMean};
pub use similarity::{cosine, similarity_scores, weighted_teacher_logits};
pub use train::{fedcsd_local_train, global_prototype, Ablation, CsdHyper, CsdObjective, FedCsd};
