use logoskit::corpus::*;
use logoskit::model::*;
use logoskit::trainer::*;

#[test]
#[ignore]
fn val_error_anatomy() {
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
    let cfg = TrainConfig::default();
    let out = finetune(&mut model, &train, &val, &cfg, |_| {}).unwrap();
    println!("[{:?}] best val {:.3} at iter {}", t0.elapsed(), out.best_val_accuracy, out.best_iter);

    for (name, ds) in [("train", &train), ("val", &val)] {
        let exs = build_train_examples(ds, &model, &cfg).unwrap();
        let (mut ok, mut n) = (0usize, 0usize);
        for ex in exs.iter() {
            let mut s = model.session();
            let labels: Vec<String> = ex.view.objects.iter().map(|o| o.label.clone()).collect();
            let ocr_texts: Vec<String> = ex.view.ocr.iter().map(|t| t.text.clone()).collect();
            let enc = model.encode_text(&mut s, &ex.view.question, &labels, &ocr_texts).unwrap();
            let obj = model.fuse_object(&mut s, enc.objects, &ex.view.objects).unwrap();
            let ocr = model.fuse_ocr(&mut s, enc.ocr, &ex.view.ocr).unwrap();
            let dec = model.teacher_inputs(&mut s, &ex.gold_words, ocr, &ocr_texts).unwrap();
            let outp = model.mm_forward(&mut s, enc.question, obj, ocr, dec).unwrap();
            let logits = model.step_logits(&mut s, outp.decoder, outp.ocr).unwrap();
            let dist = s.tape.softmax_rows(logits);
            let (steps, width) = s.tape.shape(dist);
            for t in 0..steps {
                if ex.targets.steps[t].is_empty() { continue; }
                let row = &s.tape.value(dist)[t * width..(t + 1) * width];
                let arg = row.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
                if ex.targets.steps[t].contains(&arg) { ok += 1; }
                n += 1;
            }
        }
        println!("{name}: teacher-forced argmax validity {ok}/{n}");
    }

    for item in val.items.iter().take(15) {
        let view = ItemView::build(&val, item, "A", 0.02, &model.cfg).unwrap();
        let ctx = model.encode_item(&view).unwrap();
        let ans = model.decode_greedy(&ctx).unwrap();
        let toks: Vec<&str> = view.ocr.iter().map(|t| t.text.as_str()).collect();
        println!("{} q={:?} gold={:?} got={:?} ocr={:?}", item.question_id,
                 item.question.join(" "), item.answers[0], ans.surface(), toks);
    }
}
