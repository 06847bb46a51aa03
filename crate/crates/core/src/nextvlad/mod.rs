//! NeXtVLAD pooling and the single-model video classifier built on it.

mod model;
mod pool;

pub use model::{
    dummy_segment_predict, video_model_backward, video_model_forward, HeadParams, Mode,
    ModelConfig, VideoModel, VideoWorkspace,
};
pub use pool::{
    nextvlad_pool_backward, nextvlad_pool_forward, PoolConfig, PoolGrads, PoolParams,
    PoolingWorkspace,
};
