//! SPD network layers and classification heads.

mod heads;
mod layers;
mod mlp;

pub use heads::{
    mean_rows, BiReBlock, ClassTokenHead, GapCache, GapHead, GeomCache, GeometricHead, GeometricHeadGrad, HeadConfig,
    HeadKind,
};
pub use layers::{
    bimap_backward, bimap_forward, halfvec, halfvec_backward, halfvec_len, logeig_backward, logeig_forward,
    reeig_backward, reeig_forward,
};
pub use mlp::{Dense, Mlp, MlpCache};
