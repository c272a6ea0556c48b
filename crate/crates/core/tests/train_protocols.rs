//! Training-harness behaviour at desk dimensions.

use catsel_core::prep::SeegSegment;
use catsel_core::rollout::top_k;
use catsel_core::synth::{generate, split, SynthConfig};
use catsel_core::train::{
    multi_seed, pretrain_autoencoder, reduce_channels, train_supervised, Attachment, TrainConfig, TrainData,
};
use catsel_core::chat::ChatConfig;
use catsel_core::Tensor;

struct Splits {
    train: Vec<SeegSegment>,
    val: Vec<SeegSegment>,
    test: Vec<SeegSegment>,
    planted: Vec<usize>,
}

impl Splits {
    fn data(&self) -> TrainData<'_> {
        TrainData { train: &self.train, val: &self.val, test: &self.test, classes: 4 }
    }
}

fn desk(cfg: SynthConfig) -> Splits {
    let ds = generate(&cfg).unwrap();
    let labels: Vec<usize> = ds.segments.iter().map(|s| s.label).collect();
    let sp = split(&labels, (8, 1, 1), cfg.seed).unwrap();
    let pick = |ix: &[usize]| ix.iter().map(|&i| ds.segments[i].clone()).collect::<Vec<_>>();
    Splits { train: pick(&sp.train), val: pick(&sp.val), test: pick(&sp.test), planted: ds.planted }
}

#[test]
fn classifier_alone_solves_noiseless_data() {
    let s = desk(SynthConfig { planted: 32, snr_db: f64::INFINITY, ..SynthConfig::desk(5) });
    let mut cfg = TrainConfig::desk(Attachment::ClassifierOnly);
    cfg.optim.epochs = 30;
    let r = train_supervised(&cfg, &s.data(), 0, None, &mut |_| {}).unwrap();
    assert!(r.outcome.test_accuracy >= 0.99, "accuracy {}", r.outcome.test_accuracy);
}

#[test]
fn ground_truth_subset_is_no_worse_than_all_channels() {
    let s = desk(SynthConfig::desk(11));
    let cfg = TrainConfig::desk(Attachment::ClassifierOnly);
    let seeds: Vec<u64> = (0..9).collect();
    let all = multi_seed(&cfg, &s.data(), &seeds, None, &mut |_| {}).unwrap();
    let (tr, va, te) = (
        reduce_channels(&s.train, &s.planted).unwrap(),
        reduce_channels(&s.val, &s.planted).unwrap(),
        reduce_channels(&s.test, &s.planted).unwrap(),
    );
    let reduced = TrainData { train: &tr, val: &va, test: &te, classes: 4 };
    let planted = multi_seed(&cfg, &reduced, &seeds, None, &mut |_| {}).unwrap();
    assert!(
        planted.mean_accuracy >= all.mean_accuracy,
        "planted {} vs all {}",
        planted.cell(),
        all.cell()
    );
}

#[test]
fn scores_ignore_a_global_input_scale() {
    let s = desk(SynthConfig { samples_per_class: 10, ..SynthConfig::desk(2) });
    let mut cfg = TrainConfig::desk(Attachment::ChatClassifier);
    cfg.optim.epochs = 1;
    let base = train_supervised(&cfg, &s.data(), 3, None, &mut |_| {}).unwrap().outcome;
    let scale = |segs: &[SeegSegment], k: f64| {
        segs.iter()
            .map(|x| {
                let data = Tensor::new(x.data.shape(), x.data.data().iter().map(|v| v * k).collect()).unwrap();
                SeegSegment::new(data, x.fs, x.label, x.subject_id.clone()).unwrap()
            })
            .collect::<Vec<_>>()
    };
    let a = base.channel_scores.unwrap().s;
    for k in [0.25, 3.0, 1e3] {
        let (tr, va, te) = (scale(&s.train, k), scale(&s.val, k), scale(&s.test, k));
        let data = TrainData { train: &tr, val: &va, test: &te, classes: 4 };
        let b = train_supervised(&cfg, &data, 3, None, &mut |_| {}).unwrap().outcome.channel_scores.unwrap().s;
        let worst = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(worst < 1e-6, "scale {k}: scores moved by {worst}");
        assert_eq!(top_k(&a, 3).unwrap(), top_k(&b, 3).unwrap());
    }
}

#[test]
fn reconstruction_loss_trends_down() {
    let s = desk(SynthConfig { samples_per_class: 50, ..SynthConfig::desk(4) });
    let chat = ChatConfig { dropout_p: 0.0, ..ChatConfig::main(0) };
    let mut optim = TrainConfig::desk(Attachment::ChatClassifier).optim;
    optim.epochs = 11;
    let (_, losses) = pretrain_autoencoder(&chat, &s.train, 40, &optim, 0).unwrap();
    let falling = losses.windows(2).filter(|w| w[1] < w[0]).count();
    assert!(falling >= 8, "losses {losses:?}");
}
