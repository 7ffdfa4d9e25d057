use super::config::{Plan, Strategy, TrainConfig};
use super::optim::OptimizerState;
use super::{rng_stream, Stream};
use crate::error::{Error, Result};
use crate::routing::{Checkpoint, RoutingConfig, RoutingNet};
use crate::semisup::TeacherState;
use crate::tensor::Tensor;

const TEACHER: &str = "teacher/";
const PEER: &str = "peer/";
const OPT: &str = "opt/";
const PEER_OPT: &str = "peer_opt/";
const EPOCHS_DONE: &str = "state/epochs_done";
const STEP: &str = "state/step";
const ALPHA: &str = "state/alpha";

/// The second co-teaching network with its own optimizer.
#[derive(Debug, Clone)]
pub struct Peer {
    pub net: RoutingNet,
    pub opt: OptimizerState,
}

/// Everything needed to continue training at an epoch boundary.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub student: RoutingNet,
    pub opt: OptimizerState,
    pub teacher: Option<TeacherState>,
    pub peer: Option<Peer>,
    pub epochs_done: usize,
}

impl TrainState {
    pub fn new(routing: &RoutingConfig, cfg: &TrainConfig) -> Result<Self> {
        let student = RoutingNet::new(routing.clone(), &mut rng_stream(cfg.seed, 0, Stream::InitStudent))?;
        let opt = OptimizerState::new(student.params());
        let plan = cfg.plan();
        let teacher = match plan.strategy {
            Some(Strategy::MeanTeacher) => Some(TeacherState::from_student(&student, cfg.alpha)?),
            _ => None,
        };
        let peer = match plan.strategy {
            Some(Strategy::CoTeaching) => {
                let net = RoutingNet::new(routing.clone(), &mut rng_stream(cfg.seed, 0, Stream::InitPeer))?;
                let opt = OptimizerState::new(net.params());
                Some(Peer { net, opt })
            }
            _ => None,
        };
        Ok(TrainState {
            student,
            opt,
            teacher,
            peer,
            epochs_done: 0,
        })
    }

    pub(super) fn check_compatible(&self, routing: &RoutingConfig, plan: Plan) -> Result<()> {
        if self.student.config() != routing {
            return Err(Error::Config("resumed state was trained with a different routing configuration".into()));
        }
        let ok = match plan.strategy {
            Some(Strategy::MeanTeacher) => self.teacher.is_some(),
            Some(Strategy::CoTeaching) => self.peer.is_some(),
            None => true,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config("resumed state lacks the teacher or peer this method needs".into()))
        }
    }

    /// Student under plain parameter names; teacher, peer and optimizer
    /// buffers under prefixes; counters as scalars.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::from_net(&self.student);
        let names: Vec<String> = self.student.named_tensors().into_iter().map(|(n, _)| n).collect();
        let push_opt = |ck: &mut Checkpoint, prefix: &str, opt: &OptimizerState| {
            for (name, v) in names.iter().zip(&opt.velocity) {
                ck.tensors.push((format!("{prefix}{name}"), v.clone()));
            }
        };
        push_opt(&mut ck, OPT, &self.opt);
        if let Some(t) = &self.teacher {
            ck.add_net(TEACHER, &t.net);
            ck.tensors.push((ALPHA.into(), Tensor::scalar(t.alpha)));
        }
        if let Some(p) = &self.peer {
            ck.add_net(PEER, &p.net);
            push_opt(&mut ck, PEER_OPT, &p.opt);
        }
        ck.tensors.push((EPOCHS_DONE.into(), Tensor::scalar(self.epochs_done as f64)));
        ck.tensors.push((STEP.into(), Tensor::scalar(self.opt.step as f64)));
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let student = ck.to_net()?;
        let scalar = |name: &str| -> Result<f64> {
            ck.get(name)
                .map(Tensor::item)
                .ok_or_else(|| Error::Config(format!("checkpoint has no {name}; was it written by the trainer?")))
        };
        let load_opt = |prefix: &str, net: &RoutingNet| -> Result<OptimizerState> {
            let mut opt = OptimizerState::new(net.params());
            for ((name, _), v) in net.named_tensors().iter().zip(&mut opt.velocity) {
                let t = ck
                    .get(&format!("{prefix}{name}"))
                    .ok_or_else(|| Error::Config(format!("checkpoint is missing {prefix}{name}")))?;
                if t.shape() != v.shape() {
                    return Err(Error::shape("from_checkpoint", format!("{prefix}{name}: {:?}", t.shape())));
                }
                *v = t.clone();
            }
            opt.step = scalar(STEP)? as u64;
            Ok(opt)
        };
        let opt = load_opt(OPT, &student)?;
        let has = |prefix: &str| ck.tensors.iter().any(|(n, _)| n.starts_with(prefix));
        let teacher = if has(TEACHER) {
            Some(TeacherState {
                net: ck.net_with_prefix(TEACHER)?,
                alpha: scalar(ALPHA)?,
            })
        } else {
            None
        };
        let peer = if has(PEER) {
            let net = ck.net_with_prefix(PEER)?;
            let opt = load_opt(PEER_OPT, &net)?;
            Some(Peer { net, opt })
        } else {
            None
        };
        Ok(TrainState {
            student,
            opt,
            teacher,
            peer,
            epochs_done: scalar(EPOCHS_DONE)? as usize,
        })
    }
}
