mod data_cmds;
mod eval_cmds;
mod train_cmds;

pub use data_cmds::{align, report_dist, synth, AlignArgs, ReportDistArgs, SynthArgs};
pub use eval_cmds::{
    ablate_relu, extract, identify, verify, AblateArgs, ExtractArgs, IdentifyArgs, VerifyArgs,
};
pub use train_cmds::{
    train_cnn, train_jb, train_pca, train_sae, TrainCnnArgs, TrainJbArgs, TrainPcaArgs,
    TrainSaeArgs,
};
