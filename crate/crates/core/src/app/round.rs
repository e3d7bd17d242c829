use std::collections::{BTreeMap, VecDeque};
use std::path::PathBuf;

use super::{App, AppError, AppResult, AppStage, SetupContext, SetupInfo, StageMachine, StatusReport};
use crate::protocol::ClientId;

/// Outcome of one local computation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Local {
    /// Contribution for the coordinator.
    Send(Vec<u8>),
    /// Nothing left to do; outputs are written next.
    Done,
}

/// An algorithm expressed as alternating local computation and aggregation.
///
/// Every instance runs `local`; the coordinator instance additionally runs
/// `aggregate` once it holds one contribution from every client (its own
/// included), and the result is broadcast and fed back into `local`.
/// All instances must reach [`Local::Done`] on the same global payload.
pub trait RoundAlgorithm: Send {
    fn load(&mut self, ctx: &SetupContext) -> AppResult<()>;

    fn local(&mut self, global: Option<&[u8]>) -> AppResult<Local>;

    /// `locals` is ordered like the setup client list.
    fn aggregate(&mut self, locals: Vec<(ClientId, Vec<u8>)>) -> AppResult<Vec<u8>>;

    fn write_output(&mut self, output_dir: &std::path::Path) -> AppResult<()>;
}

/// Drives a [`RoundAlgorithm`] through the four-call app API.
pub struct RoundApp<A> {
    algo: A,
    stage: StageMachine,
    info: Option<SetupInfo>,
    output_dir: PathBuf,
    outgoing: VecDeque<(Option<ClientId>, Vec<u8>)>,
    inbox: BTreeMap<ClientId, Vec<u8>>,
    done: bool,
    rounds: usize,
}

impl<A: RoundAlgorithm> RoundApp<A> {
    pub fn new(algo: A) -> Self {
        Self {
            algo,
            stage: StageMachine::default(),
            info: None,
            output_dir: PathBuf::new(),
            outgoing: VecDeque::new(),
            inbox: BTreeMap::new(),
            done: false,
            rounds: 0,
        }
    }

    pub fn algorithm(&self) -> &A {
        &self.algo
    }

    pub fn stage(&self) -> AppStage {
        self.stage.stage()
    }

    /// Number of completed aggregations.
    pub fn rounds(&self) -> usize {
        self.rounds
    }

    fn info(&self) -> &SetupInfo {
        self.info.as_ref().expect("setup completed")
    }

    fn run_local(&mut self, global: Option<&[u8]>) -> AppResult<()> {
        if self.stage.stage() == AppStage::AwaitingGlobal {
            self.stage.advance(AppStage::LocalCompute)?;
        }
        match self.algo.local(global)? {
            Local::Send(bytes) => {
                let info = self.info();
                let dest = if info.master { Some(info.id.clone()) } else { None };
                self.outgoing.push_back((dest, bytes));
                self.stage.advance(AppStage::AwaitingGlobal)?;
            }
            Local::Done => {
                self.algo.write_output(&self.output_dir)?;
                self.done = true;
                self.maybe_finish()?;
            }
        }
        Ok(())
    }

    fn maybe_finish(&mut self) -> AppResult<()> {
        if self.done && self.outgoing.is_empty() && self.stage.stage() != AppStage::Finished {
            if self.stage.stage() == AppStage::AwaitingGlobal {
                self.stage.advance(AppStage::LocalCompute)?;
            }
            self.stage.advance(AppStage::Finished)?;
        }
        Ok(())
    }
}

impl<A: RoundAlgorithm> App for RoundApp<A> {
    fn setup(&mut self, ctx: SetupContext) -> AppResult<()> {
        self.stage.expect(AppStage::AwaitingSetup, "setup")?;
        ctx.info.validate()?;
        self.algo.load(&ctx)?;
        self.output_dir = ctx.output_dir.clone();
        self.info = Some(ctx.info);
        self.stage.advance(AppStage::LocalCompute)?;
        self.run_local(None)
    }

    fn status(&self) -> StatusReport {
        match self.outgoing.front() {
            Some((dest, bytes)) => StatusReport {
                available: true,
                finished: false,
                size: Some(bytes.len() as u64),
                destination: dest.clone(),
            },
            None => StatusReport { available: false, finished: self.done, size: None, destination: None },
        }
    }

    fn fetch_outgoing(&mut self) -> AppResult<Vec<u8>> {
        let (_, bytes) =
            self.outgoing.pop_front().ok_or_else(|| AppError::Contract("fetch_outgoing with no data available".into()))?;
        self.maybe_finish()?;
        Ok(bytes)
    }

    fn deliver_incoming(&mut self, data: Vec<u8>, from: Option<ClientId>) -> AppResult<()> {
        match self.stage.stage() {
            AppStage::AwaitingSetup | AppStage::Finished => {
                return Err(AppError::Contract(format!("deliver_incoming in stage {:?}", self.stage.stage())))
            }
            _ if self.done => return Err(AppError::Contract("deliver_incoming after completion".into())),
            _ => {}
        }
        let info = self.info().clone();
        if info.master {
            let from = from.ok_or_else(|| AppError::failure("coordinator received data without a sender"))?;
            if !info.clients.contains(&from) {
                return Err(AppError::failure(format!("data from unknown client {from}")));
            }
            if self.inbox.insert(from.clone(), data).is_some() {
                return Err(AppError::failure(format!("duplicate contribution from {from} in one round")));
            }
            if self.inbox.len() == info.n_clients() {
                let mut inbox = std::mem::take(&mut self.inbox);
                let locals = info.clients.iter().map(|c| (c.clone(), inbox.remove(c).expect("complete inbox"))).collect();
                let global = self.algo.aggregate(locals)?;
                self.rounds += 1;
                if info.n_clients() > 1 {
                    self.outgoing.push_back((None, global.clone()));
                }
                self.run_local(Some(&global))?;
            }
            Ok(())
        } else {
            if from.is_some() {
                return Err(AppError::failure("participant received data addressed as a participant packet"));
            }
            if self.stage.stage() != AppStage::AwaitingGlobal {
                return Err(AppError::Contract("broadcast arrived before local data was fetched".into()));
            }
            self.rounds += 1;
            self.run_local(Some(&data))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::app::{AppConfig, StepLog};

    /// Sums one integer per client for `rounds` rounds.
    struct Summer {
        value: u64,
        rounds: usize,
        seen: Vec<u64>,
    }

    impl RoundAlgorithm for Summer {
        fn load(&mut self, _: &SetupContext) -> AppResult<()> {
            Ok(())
        }

        fn local(&mut self, global: Option<&[u8]>) -> AppResult<Local> {
            if let Some(g) = global {
                self.seen.push(u64::from_le_bytes(g.try_into().unwrap()));
            }
            if self.seen.len() == self.rounds {
                Ok(Local::Done)
            } else {
                Ok(Local::Send(self.value.to_le_bytes().to_vec()))
            }
        }

        fn aggregate(&mut self, locals: Vec<(ClientId, Vec<u8>)>) -> AppResult<Vec<u8>> {
            let sum: u64 = locals.iter().map(|(_, b)| u64::from_le_bytes(b[..].try_into().unwrap())).sum();
            Ok(sum.to_le_bytes().to_vec())
        }

        fn write_output(&mut self, _: &std::path::Path) -> AppResult<()> {
            Ok(())
        }
    }

    fn ctx(id: &str, master: bool, clients: &[&str]) -> SetupContext {
        SetupContext {
            info: SetupInfo { id: id.into(), master, clients: clients.iter().map(|c| ClientId::from(*c)).collect() },
            input_dir: PathBuf::from("."),
            output_dir: PathBuf::from("."),
            config: AppConfig::new(),
            log: StepLog::default(),
        }
    }

    fn app(value: u64, rounds: usize) -> RoundApp<Summer> {
        RoundApp::new(Summer { value, rounds, seen: Vec::new() })
    }

    #[test]
    fn two_party_session() {
        let mut c = app(3, 2);
        let mut p = app(4, 2);
        c.setup(ctx("c", true, &["c", "p"])).unwrap();
        p.setup(ctx("p", false, &["c", "p"])).unwrap();
        for _ in 0..2 {
            let s = c.status();
            assert_eq!(s.destination, Some(ClientId::from("c")));
            let own = c.fetch_outgoing().unwrap();
            c.deliver_incoming(own, Some("c".into())).unwrap();
            assert!(!c.status().available);
            let ps = p.status();
            assert!(ps.available && ps.size == Some(8));
            let pd = p.fetch_outgoing().unwrap();
            assert!(p.fetch_outgoing().is_err());
            c.deliver_incoming(pd, Some("p".into())).unwrap();
            let g = c.fetch_outgoing().unwrap();
            p.deliver_incoming(g, None).unwrap();
        }
        assert!(c.status().finished && !c.status().available);
        assert!(p.status().finished);
        assert_eq!(c.algorithm().seen, vec![7, 7]);
        assert_eq!(p.algorithm().seen, vec![7, 7]);
        assert_eq!(p.stage(), AppStage::Finished);
    }

    #[test]
    fn unknown_sender_fails_coordinator() {
        let mut c = app(1, 1);
        c.setup(ctx("c", true, &["c", "p"])).unwrap();
        assert!(matches!(c.deliver_incoming(vec![0; 8], Some("x".into())), Err(AppError::Failure(_))));
    }

    #[test]
    fn calls_before_setup_rejected() {
        let mut c = app(1, 1);
        assert!(c.deliver_incoming(vec![], None).is_err());
        assert!(c.fetch_outgoing().is_err());
        assert!(!c.status().available);
    }

    #[test]
    fn status_is_idempotent() {
        let mut p = app(1, 1);
        p.setup(ctx("p", false, &["c", "p"])).unwrap();
        assert_eq!(p.status(), p.status());
    }

    #[test]
    fn solo_session_finishes_without_broadcast() {
        let mut c = app(5, 1);
        c.setup(ctx("c", true, &["c"])).unwrap();
        let own = c.fetch_outgoing().unwrap();
        c.deliver_incoming(own, Some("c".into())).unwrap();
        assert!(c.status().finished);
        assert_eq!(c.algorithm().seen, vec![5]);
    }
}
