//! TCP transport: a blocking central server with a strict per-round barrier
//! and a client participant loop. Messages are length-prefixed (u64 LE byte
//! count) wire-format blobs, one per round per direction, with a trailing
//! done message from the server.
//!
//! Both sides derive every seed from the shared federation seed, so a
//! socket run reproduces the in-process history bit for bit.

use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::time::Duration;

use super::wire::{self, MsgType, WireMessage};
use super::{
    client_seed, client_train_round, AdapterUpdate, EvalSet, FedConfig, FederationOutcome,
    FederationRun, RoundEngine,
};
use crate::data::ClientShard;
use crate::error::{Error, Result};
use crate::lora::{import_state, merge, LoraConfig};
use crate::model::TransformerWeights;

/// Upper bound on a single framed message; anything larger is treated as a
/// corrupt length prefix.
const MAX_FRAME: u64 = 1 << 30;

fn send_frame(stream: &mut TcpStream, bytes: &[u8]) -> Result<()> {
    stream
        .write_all(&(bytes.len() as u64).to_le_bytes())
        .and_then(|_| stream.write_all(bytes))
        .map_err(|e| Error::Transport(format!("send failed: {e}")))
}

fn recv_frame(stream: &mut TcpStream) -> Result<Vec<u8>> {
    let mut len_bytes = [0u8; 8];
    stream
        .read_exact(&mut len_bytes)
        .map_err(|e| Error::Transport(format!("receive failed: {e}")))?;
    let len = u64::from_le_bytes(len_bytes);
    if len > MAX_FRAME {
        return Err(Error::Protocol {
            field: "frame_length".into(),
            detail: format!("frame of {len} bytes exceeds the {MAX_FRAME} limit"),
        });
    }
    let mut buf = vec![0u8; len as usize];
    stream
        .read_exact(&mut buf)
        .map_err(|e| Error::Transport(format!("receive failed: {e}")))?;
    Ok(buf)
}

/// Serve a federation over TCP: accept the expected number of clients, then
/// per round collect one update from every client (barrier), aggregate,
/// evaluate, and broadcast the aggregate; finish with a done message.
///
/// The server owns the evaluation corpus and writes the authoritative
/// history. Duplicate client ids and stale round indices are protocol
/// errors that abort the run.
pub fn serve(
    listener: TcpListener,
    run: &FederationRun<'_>,
    cfg: &FedConfig,
    eval: EvalSet<'_>,
    expected_clients: usize,
) -> Result<FederationOutcome> {
    if expected_clients == 0 {
        return Err(Error::Config("expected_clients must be at least 1".into()));
    }
    let timeout = Some(Duration::from_secs(cfg.timeout_secs));
    let mut streams = Vec::with_capacity(expected_clients);
    for _ in 0..expected_clients {
        let (stream, _addr) = listener
            .accept()
            .map_err(|e| Error::Transport(format!("accept failed: {e}")))?;
        stream.set_read_timeout(timeout).map_err(|e| Error::Transport(e.to_string()))?;
        stream.set_nodelay(true).ok();
        streams.push(stream);
    }

    let mut engine = RoundEngine::new(run, cfg, eval)?;
    for round in 1..=cfg.rounds {
        let mut updates: Vec<AdapterUpdate> = Vec::with_capacity(expected_clients);
        for stream in streams.iter_mut() {
            let bytes = recv_frame(stream).map_err(|e| {
                Error::Transport(format!("round {round}: barrier broken: {e}"))
            })?;
            let update = wire::decode_update(&bytes)?;
            if update.round != round {
                return Err(Error::Protocol {
                    field: "round".into(),
                    detail: format!(
                        "client {} sent round {} during round {round}",
                        update.client_id, update.round
                    ),
                });
            }
            if updates.iter().any(|u| u.client_id == update.client_id) {
                return Err(Error::Protocol {
                    field: "client_id".into(),
                    detail: format!("duplicate client id {}", update.client_id),
                });
            }
            updates.push(update);
        }
        let total_samples: u64 = updates.iter().map(|u| u.sample_count).sum();
        let aggregated = engine.apply_round(round, &updates)?;
        let reply = wire::encode(&WireMessage::aggregate(round, total_samples, aggregated));
        for stream in streams.iter_mut() {
            send_frame(stream, &reply)?;
        }
    }
    let done = wire::encode(&WireMessage::done(cfg.rounds));
    for stream in streams.iter_mut() {
        send_frame(stream, &done)?;
    }
    Ok(engine.finish())
}

/// Client-side participation settings; seeds and schedule must match the
/// server's configuration for the run to be coherent.
#[derive(Debug, Clone)]
pub struct ClientSession<'a> {
    pub base_weights: &'a TransformerWeights,
    pub lora_config: LoraConfig,
    pub train: super::TrainingConfig,
    pub fed_seed: u64,
    pub rounds: u32,
    pub reinit_adapters: bool,
    pub timeout_secs: u64,
}

/// Connect to a server and participate for the configured number of rounds:
/// train one epoch, send the update, receive and merge the aggregate.
/// Returns the client's final model.
pub fn connect_and_participate(
    addr: &str,
    session: &ClientSession<'_>,
    shard: &ClientShard,
) -> Result<TransformerWeights> {
    let mut stream =
        TcpStream::connect(addr).map_err(|e| Error::Transport(format!("connect to {addr} failed: {e}")))?;
    stream
        .set_read_timeout(Some(Duration::from_secs(session.timeout_secs)))
        .map_err(|e| Error::Transport(e.to_string()))?;
    stream.set_nodelay(true).ok();

    let geometry = session.base_weights.geometry();
    let mut weights = session.base_weights.clone();
    let mut carried_adapters: Option<Vec<crate::lora::StateEntry>> = None;
    for round in 1..=session.rounds {
        let base_adapters = match (&carried_adapters, session.reinit_adapters) {
            (Some(set), false) => import_state(geometry, &session.lora_config, set)?,
            _ => crate::lora::init_adapters(
                geometry,
                &session.lora_config,
                super::adapter_seed(session.fed_seed, round),
            )?,
        };
        let train_base = if session.reinit_adapters {
            &weights
        } else {
            session.base_weights
        };
        let update = client_train_round(
            train_base,
            &base_adapters,
            shard,
            &session.train,
            round,
            client_seed(session.fed_seed, shard.client_id, round),
        )?;
        send_frame(&mut stream, &wire::encode_update(&update))?;
        let reply = wire::decode(&recv_frame(&mut stream)?)?;
        match reply.msg_type {
            MsgType::Aggregate if reply.round == round => {
                let set = import_state(geometry, &session.lora_config, &reply.entries)?;
                if session.reinit_adapters {
                    weights = merge(&weights, &set)?;
                } else {
                    weights = merge(session.base_weights, &set)?;
                }
                carried_adapters = Some(reply.entries);
            }
            MsgType::Aggregate => {
                return Err(Error::Protocol {
                    field: "round".into(),
                    detail: format!("server aggregate for round {} during round {round}", reply.round),
                });
            }
            other => {
                return Err(Error::Protocol {
                    field: "msg_type".into(),
                    detail: format!("unexpected {other:?} during round {round}"),
                });
            }
        }
    }
    let fin = wire::decode(&recv_frame(&mut stream)?)?;
    if fin.msg_type != MsgType::Done {
        return Err(Error::Protocol {
            field: "msg_type".into(),
            detail: format!("expected done, got {:?}", fin.msg_type),
        });
    }
    Ok(weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, Corpus, Provenance, SyntheticTaskSpec, TaskId};
    use crate::federation::{run_federation, AggregationPolicy, TrainingConfig};
    use crate::lora::TaskAdapterProfile;
    use crate::model::{init_weights, ModelGeometry};

    fn setup() -> (TransformerWeights, Vec<ClientShard>, Corpus) {
        let spec = SyntheticTaskSpec {
            seed: 77,
            ..SyntheticTaskSpec::default()
        };
        let corpora = synth_generate(&spec, 40, 12).unwrap();
        let t2 = &corpora.train[1];
        let shards = vec![
            ClientShard {
                client_id: 0,
                corpus: Corpus::new(TaskId::T2, t2.records[..30].to_vec(), Provenance::Train),
            },
            ClientShard {
                client_id: 1,
                corpus: Corpus::new(TaskId::T2, t2.records[30..].to_vec(), Provenance::Train),
            },
        ];
        let weights = init_weights(&ModelGeometry::toy(), 3).unwrap();
        (weights, shards, corpora.test[1].clone())
    }

    #[test]
    fn loopback_reproduces_in_process_history() {
        let (weights, shards, test) = setup();
        let run = FederationRun {
            base_weights: &weights,
            lora_config: TaskAdapterProfile::for_task(TaskId::T2),
            train: TrainingConfig::default(),
        };
        let cfg = FedConfig {
            rounds: 2,
            policy: AggregationPolicy::SampleWeighted,
            seed: 55,
            reinit_adapters: true,
            timeout_secs: 60,
        };
        let eval = EvalSet {
            task: TaskId::T2,
            corpus: &test,
        };
        let in_process = run_federation(&run, &shards, &cfg, eval, 1).unwrap();

        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        let socket_outcome = std::thread::scope(|scope| {
            let server = {
                let run = run.clone();
                let cfg = cfg.clone();
                let test = &test;
                scope.spawn(move || {
                    serve(
                        listener,
                        &run,
                        &cfg,
                        EvalSet {
                            task: TaskId::T2,
                            corpus: test,
                        },
                        2,
                    )
                })
            };
            let mut client_models = Vec::new();
            let mut handles = Vec::new();
            for shard in shards.iter() {
                let session = ClientSession {
                    base_weights: &weights,
                    lora_config: run.lora_config.clone(),
                    train: run.train.clone(),
                    fed_seed: cfg.seed,
                    rounds: cfg.rounds,
                    reinit_adapters: cfg.reinit_adapters,
                    timeout_secs: 60,
                };
                let addr = addr.clone();
                handles.push(scope.spawn(move || connect_and_participate(&addr, &session, shard)));
            }
            for h in handles {
                client_models.push(h.join().unwrap().unwrap());
            }
            let outcome = server.join().unwrap().unwrap();
            (outcome, client_models)
        });
        let (socket, client_models) = socket_outcome;
        assert_eq!(in_process.history, socket.history);
        assert_eq!(in_process.round_entries, socket.round_entries);
        // every client tracked the same global model the server computed
        for m in client_models {
            assert_eq!(m, socket.final_weights);
        }
    }

    #[test]
    fn stale_round_is_a_protocol_error() {
        let (weights, shards, test) = setup();
        let run = FederationRun {
            base_weights: &weights,
            lora_config: TaskAdapterProfile::for_task(TaskId::T2),
            train: TrainingConfig::default(),
        };
        let cfg = FedConfig {
            rounds: 1,
            seed: 9,
            timeout_secs: 30,
            ..FedConfig::default()
        };
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        let result = std::thread::scope(|scope| {
            let server = {
                let run = run.clone();
                let cfg = cfg.clone();
                let test = &test;
                scope.spawn(move || {
                    serve(
                        listener,
                        &run,
                        &cfg,
                        EvalSet {
                            task: TaskId::T2,
                            corpus: test,
                        },
                        1,
                    )
                })
            };
            let shard = &shards[0];
            let weights = &weights;
            scope.spawn(move || {
                let mut stream = TcpStream::connect(&addr).unwrap();
                let adapters = crate::lora::init_adapters(
                    weights.geometry(),
                    &TaskAdapterProfile::for_task(TaskId::T2),
                    1,
                )
                .unwrap();
                let mut update = client_train_round(
                    weights,
                    &adapters,
                    shard,
                    &TrainingConfig::default(),
                    1,
                    1,
                )
                .unwrap();
                update.round = 7; // stale/ahead round index
                send_frame(&mut stream, &wire::encode_update(&update)).unwrap();
            });
            server.join().unwrap()
        });
        match result.unwrap_err() {
            Error::Protocol { field, .. } => assert_eq!(field, "round"),
            other => panic!("unexpected {other}"),
        }
    }
}
