use std::io::Cursor;

use plevent::detect_basic::{run_stream, EventSource, StreamOptions};
use plevent::io::{format_scenario, parse_scenario, read_labels, read_messages, read_report, write_labels, write_message, EventWriter, ReportHeader};
use plevent::model::DetectorConfig;
use plevent::synth::evaluate;

const SCENARIO: &str = r#"
region = { min_lat = -38.0, min_lon = 144.7, max_lat = -37.6, max_lon = 145.2 }
origin = 1400000000
duration = 18000.0
background_rate = 0.0073
background_vocab = ["tram", "coffee", "river", "lane", "market"]
seed = 3

[[burst]]
lat = -37.81
lon = 144.96
spatial_sigma = 0.005
start = 3600.0
end = 7200.0
bin_d = 22.5
alpha = 2.0
xmin = 1
tag = "parade"
tag_frac = 0.6

[[burst]]
lat = -37.70
lon = 145.10
spatial_sigma = 0.005
start = 10800.0
end = 14400.0
bin_d = 22.5
alpha = 2.0
xmin = 1
tag = "concert"
tag_frac = 0.6
"#;

#[test]
fn scenario_to_scored_report() {
    let sc = parse_scenario(SCENARIO).unwrap();
    assert_eq!(parse_scenario(&format_scenario(&sc).unwrap()).unwrap(), sc);
    let stream = sc.generate().unwrap();

    let mut buf = Vec::new();
    for m in &stream.messages {
        write_message(&mut buf, m).unwrap();
    }
    let messages: Vec<_> = read_messages(Cursor::new(buf)).collect::<Result<_, _>>().unwrap();
    assert!(messages == stream.messages, "messages change across a write/read round trip");

    let mut labels = Vec::new();
    write_labels(&mut labels, &stream.truth).unwrap();
    let truth = read_labels(Cursor::new(labels)).unwrap();
    assert_eq!(truth, stream.truth);

    let config = DetectorConfig::preset("melbourne").unwrap();
    let opts = StreamOptions { origin: Some(sc.origin), end: Some(sc.origin + 18000), slack: 0 };
    let mut w = EventWriter::new(Vec::new(), ReportHeader::new(EventSource::Basic, sc.region, config.clone(), None)).unwrap();
    let mut windows = 0;
    for r in run_stream(messages, sc.region, &config, opts).unwrap() {
        for e in &r.unwrap().events {
            w.write(e).unwrap();
        }
        windows += 1;
    }
    assert_eq!(windows, 10);
    let bytes = w.finish(windows, Some(sc.origin)).unwrap();

    let report = read_report(Cursor::new(bytes)).unwrap();
    let scope = report.eval_scope().unwrap();
    assert_eq!(scope.windows.len(), 10);
    assert_eq!(scope.windows[1], (sc.origin + 1800, sc.origin + 3600));
    let score = evaluate(&report.events, &truth, &scope);
    assert_eq!(score.n_total, 2);
    assert_eq!(score.n_true, 2);
    assert_eq!(score.precision, 1.0);
    assert_eq!(score.n_localized, 2);
}
