//! Representation analyses: joint PCA maps, feature-map cosine similarity and
//! linear CKA.

mod cka;
mod cosine;
mod pca;

pub use cka::{blockwise_cka_matrix, flatten_features, guidance_cka_curve, linear_cka, CkaMatrix, CkaResult};
pub use cosine::{cosine_similarity, pair_cosine_similarity, CosinePooling, CosineResult};
pub use pca::{joint_pca, joint_pca_rgb, JointPca, PcaMap};
