// scratch probe for toy training convergence
use ftn::data::generate_toy_set;
use ftn::model::{FtnModel, ModelConfig};
use ftn::train::{evaluate_miou, train_toy, TrainConfig};

fn main() {
    for model_seed in [0u64, 1, 7] {
        for data_seed in [100u64, 200] {
            let t0 = std::time::Instant::now();
            let mut model: FtnModel<f32> =
                FtnModel::new(&ModelConfig::toy(2), model_seed).unwrap();
            let train_set = generate_toy_set(data_seed, 4, 64, 64, 2).unwrap();
            let eval_set = generate_toy_set(data_seed + 1, 4, 64, 64, 2).unwrap();
            let cfg = TrainConfig::default();
            match train_toy(&mut model, &train_set, &cfg) {
                Ok(trace) => {
                    let init = trace[0].loss;
                    let init_main = trace[0].main_loss;
                    let last = trace.last().unwrap().loss;
                    let miou_train = evaluate_miou(&model, &train_set).unwrap();
                    let miou = evaluate_miou(&model, &eval_set).unwrap();
                    println!(
                        "seed m{model_seed}/d{data_seed}: init={init:.4} (main {init_main:.4}, ln2={:.4}) final={last:.4} ratio={:.3} miou_train={miou_train:.4} miou_eval={miou:.4}  [{:?}]",
                        (2.0f64).ln(), last / init, t0.elapsed()
                    );
                }
                Err(e) => println!("seed m{model_seed}/d{data_seed}: FAILED {e}"),
            }
        }
    }
}
