use tsap_core::datagen::{
    extract_labeled_windows, generate_corpus, generate_session, select_channel_subset, CorpusConfig, Recording,
    WORD_ONSET,
};

fn default_corpus() -> Vec<Recording> {
    generate_corpus(&CorpusConfig::default(), 7).unwrap()
}

#[test]
fn word_onset_counts_track_the_event_rate() {
    let cfg = CorpusConfig::default();
    let expected = cfg.event_rate_hz * cfg.duration_s;
    let corpus = default_corpus();
    assert_eq!(corpus.len(), cfg.n_subjects * cfg.sessions_per_subject);
    for rec in &corpus {
        let n = rec.events[WORD_ONSET].len() as f64;
        assert!(
            (n - expected).abs() <= 0.1 * expected,
            "subject {} session {}: {n} events, expected {expected}",
            rec.subject_id,
            rec.session_id
        );
    }
}

#[test]
fn negative_windows_keep_away_from_every_event() {
    let corpus = default_corpus();
    let rec = &corpus[0];
    let events = &rec.events[WORD_ONSET];
    let windows = extract_labeled_windows(rec, WORD_ONSET, 1.0, false, 7).unwrap();
    let mut negatives = 0;
    for w in windows.iter().filter(|w| !w.label) {
        negatives += 1;
        let c = w.center_s();
        for &e in events {
            assert!((c - e).abs() >= 0.5 - 1e-9, "negative at {c} is {} s from event {e}", (c - e).abs());
        }
    }
    assert!(negatives > 0);
    for w in windows.iter().filter(|w| w.label) {
        assert!(events.iter().any(|&e| (w.center_s() - e).abs() < 1e-9));
    }
}

#[test]
fn channel_subset_overlap_is_hypergeometric() {
    let cfg = CorpusConfig {
        n_subjects: 1,
        sessions_per_subject: 1,
        duration_s: 12.0,
        ..CorpusConfig::default()
    };
    let rec = generate_session(&cfg, 3, 0, 0).unwrap();
    let (n, k, draws) = (32usize, 16usize, 1000u64);
    assert_eq!(rec.n_chan(), n);
    let overlaps: Vec<f64> = (0..draws)
        .map(|i| {
            let a = select_channel_subset(&rec, k, 2 * i).unwrap();
            let b = select_channel_subset(&rec, k, 2 * i + 1).unwrap();
            assert!(a.windows(2).all(|p| p[0] < p[1]));
            a.iter().filter(|c| b.contains(c)).count() as f64
        })
        .collect();
    let (nf, kf) = (n as f64, k as f64);
    let mean_expected = kf * kf / nf;
    let var_expected = kf * (kf / nf) * ((nf - kf) / nf) * ((nf - kf) / (nf - 1.0));
    let mean = overlaps.iter().sum::<f64>() / draws as f64;
    let var = overlaps.iter().map(|o| (o - mean).powi(2)).sum::<f64>() / (draws - 1) as f64;
    // four standard errors on the mean; the sample variance of 1000 draws is within ~15%
    assert!((mean - mean_expected).abs() < 4.0 * (var_expected / draws as f64).sqrt(), "mean overlap {mean}");
    assert!((var / var_expected - 1.0).abs() < 0.25, "overlap variance {var} vs {var_expected}");
    assert_eq!(select_channel_subset(&rec, n, 0).unwrap().len(), n);
    assert_eq!(select_channel_subset(&rec, 1, 5).unwrap(), select_channel_subset(&rec, 1, 5).unwrap());
}
