use std::time::Duration;

use fedmdfnn::fed::net::{run_client, FedServer};
use fedmdfnn::fed::protocol::{check_transcript, digest_hex};
use fedmdfnn::fed::{digest, partition, run_federated, ClientState, FedConfig};
use fedmdfnn::io::DATASET_FIELDS;
use fedmdfnn::mdfnn::{init_model, FeedbackInput, ModelConfig, ModelParams, OptimizerConfig, TrainingRow};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rows(n: usize) -> Vec<TrainingRow> {
    (0..n)
        .map(|i| {
            let a = i as f64 / n as f64;
            TrainingRow {
                input: vec![a, 1.0 - a, (i % 3) as f64 / 3.0],
                feedback: FeedbackInput([a * 0.5, 0.1, a * 0.5 + 0.2, 0.4]),
                target: [a * 0.5, 0.1, a * 0.5 + 0.2, 0.4, f64::from(i % 2 == 0)],
            }
        })
        .collect()
}

fn initial() -> ModelParams {
    let cfg = ModelConfig { input_width: 3, hidden_width: 8, hidden_layers: 3, ..ModelConfig::default() };
    init_model(&cfg, &mut ChaCha8Rng::seed_from_u64(17)).unwrap()
}

fn clients(n: usize) -> Vec<ClientState> {
    partition(&rows(90), n)
        .into_iter()
        .enumerate()
        .map(|(i, part)| ClientState::new(i as u32, part, OptimizerConfig::default(), 100 + i as u64))
        .collect()
}

#[test]
fn tcp_rounds_match_in_process_rounds() {
    let cfg = FedConfig { rounds: 4, local_epochs: 2, min_clients: 2, timeout_secs: 20.0 };
    let mut local = clients(2);
    let mut digests = Vec::new();
    let expected = run_federated(&mut local, initial(), &cfg, |rec, _| {
        digests.push(rec.digest);
        Ok(())
    })
    .unwrap();

    let mut server = FedServer::bind("127.0.0.1:0", initial(), cfg, 2).unwrap();
    let addr = server.local_addr().unwrap();
    let remote = clients(2);
    let (global, summaries) = std::thread::scope(|s| {
        let handles: Vec<_> = remote
            .into_iter()
            .map(|mut c| {
                s.spawn(move || {
                    run_client(addr, &mut c, cfg.local_epochs, Duration::from_secs(10), Some(Duration::from_secs(20)))
                })
            })
            .collect();
        server.accept_clients().unwrap();
        let mut seen = Vec::new();
        let global = server
            .run(|rec, _| {
                seen.push(rec.digest);
                Ok(())
            })
            .unwrap();
        assert_eq!(seen, digests);
        let summaries: Vec<_> = handles.into_iter().map(|h| h.join().unwrap().unwrap()).collect();
        (global, summaries)
    });

    assert!(global.bit_eq(&expected));
    for s in summaries {
        assert_eq!(s.rounds, 4);
        assert_eq!(s.last_digest, Some(digest_hex(digest(&expected))));
    }

    let transcript = server.transcript();
    check_transcript(transcript.iter().map(String::as_str)).unwrap();
    for line in transcript {
        for field in DATASET_FIELDS {
            assert!(!line.contains(&format!("\"{field}\"")), "{field} on the wire: {line}");
        }
    }
}

#[test]
fn server_times_out_without_enough_clients() {
    let cfg = FedConfig { rounds: 1, min_clients: 2, timeout_secs: 0.2, ..FedConfig::default() };
    let mut server = FedServer::bind("127.0.0.1:0", initial(), cfg, 2).unwrap();
    assert!(server.accept_clients().is_err());
}

#[test]
fn garbage_hello_gets_an_error_frame() {
    use std::io::{BufRead, BufReader, Write};
    let cfg = FedConfig { rounds: 1, min_clients: 1, timeout_secs: 1.0, ..FedConfig::default() };
    let mut server = FedServer::bind("127.0.0.1:0", initial(), cfg, 1).unwrap();
    let addr = server.local_addr().unwrap();
    let reply = std::thread::scope(|s| {
        let h = s.spawn(move || {
            let mut stream = std::net::TcpStream::connect(addr).unwrap();
            stream.write_all(b"{\"type\":\"gossip\"}\n").unwrap();
            let mut line = String::new();
            BufReader::new(stream).read_line(&mut line).unwrap();
            line
        });
        assert!(server.accept_clients().is_err());
        h.join().unwrap()
    });
    assert!(reply.contains("\"type\":\"error\""), "{reply}");
}
