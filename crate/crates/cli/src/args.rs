use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use tensor_ols::networks::WeightNorm;
use tensor_ols::{Activation, Error, MeasureSpec, Result};

/// Tensorized least squares for functions generated by neural networks.
#[derive(Parser, Debug)]
#[command(name = "polyreg", version, about)]
pub struct Cli {
    /// Base seed for every random stream
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Worker threads (defaults to all cores)
    #[arg(long, global = true)]
    pub workers: Option<usize>,

    /// Output directory or file, depending on the command
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Config file (TOML or JSON)
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Fit or apply a T-OLS predictor
    #[command(subcommand)]
    Tols(TolsCmd),
    /// Exact eigenvalues of the feature covariance against the bounds
    Condnum(CondnumArgs),
    /// Run experiments from config files
    #[command(subcommand)]
    Experiment(ExperimentCmd),
    /// Image classification with conv pair features
    #[command(subcommand)]
    Mnist(MnistCmd),
    /// Synthetic datasets
    #[command(subcommand)]
    Dataset(DatasetCmd),
}

#[derive(Subcommand, Debug)]
pub enum TolsCmd {
    /// Fit on a synthetic dataset and write the predictor as JSON
    Fit(TolsFitArgs),
    /// Predict with a saved predictor
    Predict(TolsPredictArgs),
}

#[derive(Args, Debug)]
pub struct TolsFitArgs {
    /// Dataset sidecar written by `dataset synth`
    #[arg(long)]
    pub data: PathBuf,
    /// Tensor degree M
    #[arg(long)]
    pub degree: Option<usize>,
    /// Derive M from the teacher's activation at this accuracy
    #[arg(long, conflicts_with = "degree")]
    pub epsilon: Option<f64>,
    /// Per-layer budget divisor used with --epsilon
    #[arg(long, default_value_t = 4.0)]
    pub divisor: f64,
    /// Where to write the predictor (default: <out>/predictor.json)
    #[arg(long)]
    pub model: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct TolsPredictArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset sidecar; targets, when present, are scored
    #[arg(long, conflicts_with = "inputs")]
    pub data: Option<PathBuf>,
    /// Raw matrix dump of inputs
    #[arg(long)]
    pub inputs: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct CondnumArgs {
    /// rademacher | uniform[:lo,hi] | discrete:v1,v2,... | weighted:v1,v2,...@w1,w2,...
    #[arg(long, value_parser = parse_measure)]
    pub measure: Vec<MeasureSpec>,
    /// Dimensions
    #[arg(long, value_delimiter = ',')]
    pub d: Vec<usize>,
    /// Degrees
    #[arg(long, value_delimiter = ',')]
    pub k: Vec<usize>,
}

#[derive(Subcommand, Debug)]
pub enum ExperimentCmd {
    /// Validate and run a config, writing a run directory
    Run {
        /// Config file; `--config` is accepted too
        #[arg(value_name = "CONFIG")]
        file: Option<PathBuf>,
    },
    /// Validate a config and print the resolved form
    Check {
        #[arg(value_name = "CONFIG")]
        file: Option<PathBuf>,
    },
}

#[derive(Args, Debug, Clone)]
pub struct ImagePair {
    #[arg(long)]
    pub images: PathBuf,
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    /// Use only the first N images
    #[arg(long)]
    pub max: Option<usize>,
}

#[derive(Subcommand, Debug)]
pub enum MnistCmd {
    /// Train the batched one-vs-rest classifier
    Train(MnistTrainArgs),
    /// Accuracy of a saved classifier
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: ImagePair,
    },
    /// Accuracy under Gaussian noise and black patches
    Noise {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: ImagePair,
        #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8")]
        sigmas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0,10,25,40,55,70,100,150,200")]
        areas: Vec<f64>,
    },
}

#[derive(Args, Debug)]
pub struct MnistTrainArgs {
    #[arg(long)]
    pub train_images: PathBuf,
    #[arg(long)]
    pub train_labels: PathBuf,
    #[arg(long)]
    pub test_images: PathBuf,
    #[arg(long)]
    pub test_labels: PathBuf,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, default_value_t = 50)]
    pub batches: usize,
    #[arg(long, default_value_t = 1000)]
    pub batch_size: usize,
    /// Pair radius of the conv features
    #[arg(long, default_value_t = 2)]
    pub radius: usize,
    #[arg(long)]
    pub max_test: Option<usize>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum NormArg {
    L1,
    L2,
}

impl From<NormArg> for WeightNorm {
    fn from(n: NormArg) -> Self {
        match n {
            NormArg::L1 => WeightNorm::L1Rows,
            NormArg::L2 => WeightNorm::L2Sphere,
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum DatasetCmd {
    /// Sample inputs and label them with a random teacher network
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub d: usize,
    #[arg(long, default_value_t = 1)]
    pub depth: usize,
    #[arg(long)]
    pub width: usize,
    #[arg(long)]
    pub n: usize,
    /// relu | sigmoid | pow:k | poly:c0,c1,...
    #[arg(long, value_parser = parse_activation, default_value = "relu")]
    pub activation: Activation,
    #[arg(long, value_parser = parse_measure, default_value = "uniform")]
    pub measure: MeasureSpec,
    #[arg(long, value_enum, default_value_t = NormArg::L1)]
    pub norm: NormArg,
    /// File stem inside the output directory
    #[arg(long, default_value = "synth")]
    pub stem: String,
}

fn floats(s: &str) -> std::result::Result<Vec<f64>, String> {
    s.split(',')
        .map(|t| t.trim().parse::<f64>().map_err(|e| format!("`{t}`: {e}")))
        .collect()
}

pub fn parse_measure(s: &str) -> std::result::Result<MeasureSpec, String> {
    let (name, rest) = s.split_once(':').unwrap_or((s, ""));
    let spec: Result<MeasureSpec> = match name {
        "rademacher" => Ok(MeasureSpec::rademacher()),
        "uniform" if rest.is_empty() => Ok(MeasureSpec::standard_uniform()),
        "uniform" => match floats(rest)?.as_slice() {
            [lo, hi] => MeasureSpec::uniform(*lo, *hi),
            _ => return Err("uniform takes `uniform:lo,hi`".into()),
        },
        "discrete" => MeasureSpec::discrete_uniform(floats(rest)?),
        "weighted" => {
            let (v, w) = rest.split_once('@').ok_or("weighted takes `weighted:values@weights`")?;
            MeasureSpec::discrete_weighted(floats(v)?, floats(w)?)
        }
        _ => return Err(format!("unknown measure `{name}`")),
    };
    spec.map_err(|e| e.to_string())
}

pub fn parse_activation(s: &str) -> std::result::Result<Activation, String> {
    let (name, rest) = s.split_once(':').unwrap_or((s, ""));
    match name {
        "relu" => Ok(Activation::Relu),
        "sigmoid" => Ok(Activation::Sigmoid),
        "pow" => rest
            .parse::<usize>()
            .map(Activation::monomial)
            .map_err(|e| format!("pow:k: {e}")),
        "poly" => Activation::polynomial(floats(rest)?).map_err(|e: Error| e.to_string()),
        _ => Err(format!("unknown activation `{name}`")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn measures_parse() {
        assert_eq!(parse_measure("rademacher").unwrap(), MeasureSpec::rademacher());
        assert_eq!(parse_measure("uniform").unwrap(), MeasureSpec::standard_uniform());
        assert_eq!(
            parse_measure("uniform:0,1").unwrap(),
            MeasureSpec::uniform(0.0, 1.0).unwrap()
        );
        assert_eq!(
            parse_measure("weighted:-1,1@0.3,0.7").unwrap(),
            MeasureSpec::discrete_weighted(vec![-1.0, 1.0], vec![0.3, 0.7]).unwrap()
        );
        assert!(parse_measure("discrete:2,3").is_err());
        assert!(parse_measure("cauchy").is_err());
    }

    #[test]
    fn activations_parse() {
        assert_eq!(parse_activation("relu").unwrap(), Activation::Relu);
        assert_eq!(parse_activation("pow:2").unwrap(), Activation::monomial(2));
        assert_eq!(
            parse_activation("poly:0,1,0.5").unwrap(),
            Activation::Polynomial(vec![0.0, 1.0, 0.5])
        );
        assert!(parse_activation("tanh").is_err());
    }

    #[test]
    fn global_flags_after_subcommand() {
        let cli = Cli::try_parse_from([
            "polyreg",
            "experiment",
            "run",
            "c.toml",
            "--seed",
            "3",
            "--workers",
            "2",
        ])
        .unwrap();
        assert_eq!(cli.seed, Some(3));
        assert_eq!(cli.workers, Some(2));
    }
}
