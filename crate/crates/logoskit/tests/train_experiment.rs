use logoskit::corpus::*;
use logoskit::model::*;
use logoskit::trainer::*;

#[test]
#[ignore]
fn long_run_ceiling() {
    let t0 = std::time::Instant::now();
    let synth = SynthConfig::default();
    let (train, val) = gen_synthetic(&synth).unwrap();
    let answers: Vec<String> = train.items.iter().map(|i| i.answers[0].clone()).collect();
    let vocab = build_vocab(&answers, 5000).unwrap();
    let tokens = TokenVocab::from_dataset(&train, &vocab);
    let mut model = Model::new(ModelConfig::default(), vocab, tokens, 7).unwrap();
    let gset = build_grounding_set(&train, 4, 2, 7).unwrap();
    let gcfg = TrainConfig { total_iters: 600, warmup_iters: 60, decay_points: vec![350, 475], ..TrainConfig::default() };
    pretrain_grounding(&mut model, &gset, &gcfg, |_| {}).unwrap();
    println!("[{:?}] pretrained", t0.elapsed());
    let cfg = TrainConfig { total_iters: 6000, warmup_iters: 100, decay_points: vec![3500, 4750], eval_every: 500, ..TrainConfig::default() };
    let out = finetune(&mut model, &train, &val, &cfg, |l| {
        if l.iter % 250 == 0 || l.val_accuracy.is_some() {
            println!("[{:?}] iter {} lr {:.2e} loss {:.4} val {:?}", t0.elapsed(), l.iter, l.lr, l.loss, l.val_accuracy);
        }
    }).unwrap();
    println!("best val {:.4} at iter {}; wall {:?}", out.best_val_accuracy, out.best_iter, t0.elapsed());
}
