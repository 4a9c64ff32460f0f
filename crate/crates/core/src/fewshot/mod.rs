//! Few-shot prediction pathway: ambiguous-sample mining, demonstration
//! sampling, in-context bundles, multimodal-model clients and the prediction
//! embedding.

mod demos;
mod lmm;
mod mining;

pub use demos::{
    build_icl_prompt, sample_demonstrations, DemoStrategy, Demonstration, DemonstrationSet,
    IclBundle, ICL_INSTRUCTION,
};
pub use lmm::{
    lmm_client, one_hot_index, project_prediction, query_lmm, FileReplay, LmmClient, LmmSpec,
    MajorityMock, NoisyMock, OracleMock, PredictionLift, ReplayRecord, LMM_PROVIDERS,
};
pub use mining::{
    ambiguous_count, cluster_purity, kmeans, pca, select_ambiguous, silhouette, zscore_columns,
    zscore_flatten, ClusterModel, FeatureMatrix, PcaResult,
};
