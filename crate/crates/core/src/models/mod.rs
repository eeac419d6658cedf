//! Neural-process predictives and their deployment.

pub mod deploy;
pub mod neural;
pub mod predictive;

pub use deploy::{
    ar_convcnp_loglik, ar_convcnp_loglik_with_orders, convcnp_predict, convgnp_predict,
    danp_aux_draws, danp_component_logliks, danp_joint_loglik, danp_layer_marginals,
    danp_layer_predict, danp_marginals, danp_sample_aux, DeployConfig, ForwardCounter, LayerModel,
};
pub use neural::{init_params, BaseHead, DanpSpec, ModelSpec, NeuralProcess};
pub use predictive::{
    gaussian_loglik, Covariance, GaussianPredictive, HeadLayout, MixturePredictive,
};
