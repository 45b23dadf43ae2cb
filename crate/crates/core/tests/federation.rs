//! Networked rounds driven over loopback, including hand-written clients
//! that misbehave.

use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpStream};
use std::time::Duration;

use fedwq::federation::wire::{self, WireMessage};
use fedwq::federation::{
    run_agent, run_round_simulated, serve, write_audit_log, AgentCalibration, AuditRecord, CalibrationRoundConfig,
    Direction,
};
use fedwq::{AggregationMethod, Error, ScoreSample};

fn sample(n: usize, offset: f64) -> ScoreSample {
    ScoreSample::new((0..n).map(|i| offset + i as f64 / n as f64).collect()).unwrap()
}

fn config(method: AggregationMethod, agents: usize, round: &str) -> CalibrationRoundConfig {
    CalibrationRoundConfig::new(0.1, method, agents, round).unwrap().with_timeout(Duration::from_secs(10))
}

/// Sends raw lines and returns the first reply line, if any.
fn raw_exchange(addr: SocketAddr, lines: &[&str]) -> Option<WireMessage> {
    let mut stream = TcpStream::connect(addr).unwrap();
    stream.set_read_timeout(Some(Duration::from_secs(10))).unwrap();
    for line in lines {
        stream.write_all(line.as_bytes()).unwrap();
        stream.write_all(b"\n").unwrap();
    }
    let mut reply = String::new();
    BufReader::new(&stream).read_line(&mut reply).ok()?;
    (!reply.is_empty()).then(|| wire::decode(&reply).unwrap())
}

fn error_code(message: Option<WireMessage>) -> String {
    match message {
        Some(WireMessage::Error(e)) => e.code,
        other => panic!("expected an error message, got {other:?}"),
    }
}

fn finish_round(addr: SocketAddr, cfg: &CalibrationRoundConfig, ids: &[usize]) {
    std::thread::scope(|s| {
        for &id in ids {
            s.spawn(move || run_agent(addr, id, &sample(50 + id, 0.0), cfg).unwrap());
        }
    });
}

fn thresholds_sent(audit: &[AuditRecord]) -> usize {
    audit.iter().filter(|r| r.direction == Direction::Downstream && r.message_type == "threshold").count()
}

#[test]
fn loopback_round_matches_simulation_and_audits_every_line() {
    let cfg = config(AggregationMethod::PooledScores, 2, "pooled");
    let agents = vec![
        AgentCalibration { agent_id: 0, sample: sample(2500, 0.0) },
        AgentCalibration { agent_id: 1, sample: sample(300, 0.5) },
    ];
    let server = serve("127.0.0.1:0", &cfg).unwrap();
    let addr = server.local_addr();
    let net: Vec<_> = std::thread::scope(|s| {
        let cfg = &cfg;
        let handles: Vec<_> =
            agents.iter().map(|a| s.spawn(move || run_agent(addr, a.agent_id, &a.sample, cfg).unwrap())).collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let round = server.wait().unwrap();
    let sim = run_round_simulated(&agents, &cfg).unwrap();
    assert_eq!(round.outcome, sim.outcome);
    assert!(net.iter().all(|t| Some(*t) == sim.q_hat()));
    // 3 chunks from agent 0, 1 from agent 1.
    let up = round.audit.iter().filter(|r| r.direction == Direction::Upstream).count();
    let down = round.audit.iter().filter(|r| r.direction == Direction::Downstream).count();
    assert_eq!((up, down), (4, 2));
    assert!(round.audit.iter().all(|r| r.round_id == "pooled"));

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("audit.jsonl");
    write_audit_log(&path, &round.audit).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 6);
    for line in text.lines() {
        let value: serde_json::Value = serde_json::from_str(line).unwrap();
        assert!(value["bytes"].as_u64().unwrap() > 0);
    }
}

#[test]
fn malformed_line_is_rejected_without_ending_the_round() {
    let cfg = config(AggregationMethod::WeightedAverage, 2, "m");
    let server = serve("127.0.0.1:0", &cfg).unwrap();
    let addr = server.local_addr();
    assert_eq!(error_code(raw_exchange(addr, &["{not json"])), "parse");
    assert_eq!(
        error_code(raw_exchange(
            addr,
            &[r#"{"type":"summary","round_id":"m","agent_id":0,"q":0.5,"q_hex":"0x1.0p-2","n":3}"#]
        )),
        "parse",
        "decimal and hex fields disagree"
    );
    finish_round(addr, &cfg, &[0, 1]);
    assert_eq!(thresholds_sent(&server.wait().unwrap().audit), 2);
}

#[test]
fn zero_size_summary_is_a_validation_error() {
    let cfg = config(AggregationMethod::WeightedAverage, 1, "z");
    let server = serve("127.0.0.1:0", &cfg).unwrap();
    let addr = server.local_addr();
    let line = r#"{"type":"summary","round_id":"z","agent_id":0,"q":0.5,"q_hex":"0x1.0p-1","n":0}"#;
    assert_eq!(error_code(raw_exchange(addr, &[line])), "validation");
    finish_round(addr, &cfg, &[0]);
    server.wait().unwrap();
}

#[test]
fn duplicate_agent_is_rejected() {
    let cfg = config(AggregationMethod::WeightedAverage, 2, "d");
    let server = serve("127.0.0.1:0", &cfg).unwrap();
    let addr = server.local_addr();
    let first = std::thread::spawn({
        let cfg = cfg.clone();
        move || run_agent(addr, 0, &sample(40, 0.0), &cfg)
    });
    // Wait until the first summary has been processed.
    std::thread::sleep(Duration::from_millis(200));
    match run_agent(addr, 0, &sample(40, 0.0), &cfg) {
        Err(Error::Protocol { code, .. }) => assert_eq!(code, "duplicate_agent"),
        other => panic!("expected duplicate_agent, got {other:?}"),
    }
    finish_round(addr, &cfg, &[1]);
    first.join().unwrap().unwrap();
    assert_eq!(thresholds_sent(&server.wait().unwrap().audit), 2);
}

#[test]
fn round_mismatch_is_reported_to_the_agent() {
    let cfg = config(AggregationMethod::WeightedAverage, 1, "right");
    let server = serve("127.0.0.1:0", &cfg).unwrap();
    let addr = server.local_addr();
    let wrong = config(AggregationMethod::WeightedAverage, 1, "wrong");
    match run_agent(addr, 0, &sample(40, 0.0), &wrong) {
        Err(Error::Protocol { code, .. }) => assert_eq!(code, "round_mismatch"),
        other => panic!("expected round_mismatch, got {other:?}"),
    }
    finish_round(addr, &cfg, &[0]);
    server.wait().unwrap();
}

#[test]
fn alpha_mismatch_is_detected_by_the_agent() {
    let cfg = config(AggregationMethod::WeightedAverage, 1, "a");
    let server = serve("127.0.0.1:0", &cfg).unwrap();
    let addr = server.local_addr();
    let other = CalibrationRoundConfig::new(0.2, AggregationMethod::WeightedAverage, 1, "a").unwrap();
    match run_agent(addr, 0, &sample(40, 0.0), &other) {
        Err(Error::Protocol { code, .. }) => assert_eq!(code, "alpha_mismatch"),
        other => panic!("expected alpha_mismatch, got {other:?}"),
    }
    server.wait().unwrap();
}

#[test]
fn disconnect_before_reporting_aborts_the_round() {
    let cfg = config(AggregationMethod::PooledScores, 2, "x");
    let server = serve("127.0.0.1:0", &cfg).unwrap();
    let addr = server.local_addr();
    let waiting = std::thread::spawn({
        let cfg = cfg.clone();
        move || run_agent(addr, 1, &sample(40, 0.0), &cfg)
    });
    std::thread::sleep(Duration::from_millis(200));
    {
        // Half of a two-chunk upload, then hang up.
        let mut stream = TcpStream::connect(addr).unwrap();
        let line = r#"{"type":"scores","round_id":"x","agent_id":0,"chunk":0,"of":2,"values":[0.5],"values_hex":["0x1.0p-1"]}"#;
        stream.write_all(line.as_bytes()).unwrap();
        stream.write_all(b"\n").unwrap();
    }
    match server.wait() {
        Err(Error::PartialRound { received, expected, .. }) => assert_eq!((received, expected), (1, 2)),
        other => panic!("expected a partial round, got {other:?}"),
    }
    match waiting.join().unwrap() {
        Err(Error::Protocol { code, .. }) => assert_eq!(code, "partial_round"),
        other => panic!("expected partial_round, got {other:?}"),
    }
}

#[test]
fn timeout_aborts_without_aggregating() {
    let cfg = config(AggregationMethod::WeightedAverage, 2, "t").with_timeout(Duration::from_millis(300));
    let server = serve("127.0.0.1:0", &cfg).unwrap();
    let addr = server.local_addr();
    match run_agent(addr, 0, &sample(40, 0.0), &cfg) {
        Err(Error::Protocol { code, .. }) => assert_eq!(code, "partial_round"),
        other => panic!("expected partial_round, got {other:?}"),
    }
    assert!(matches!(server.wait(), Err(Error::PartialRound { received: 1, expected: 2, .. })));
}
