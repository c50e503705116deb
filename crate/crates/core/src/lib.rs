pub mod archive;
pub mod attention;
pub mod error;
pub mod finetune;
pub mod linalg;
pub mod tensor;
pub mod transform;

pub use attention::{
    mha_forward, mha_forward_factored, rope_apply, AttentionWeights, CloverFactors, DecomposeMode, Dims, RopeSpec,
};
pub use error::{ArchiveError, Error, Result};
pub use tensor::{matmul, softmax_rows, MaskSpec, Rng, Tensor};
