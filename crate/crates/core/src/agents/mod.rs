//! Agent specification, the built-in scripted policy zoo, the discrete action
//! adapter, and remote-agent sessions.

pub mod protocol;

use std::collections::BTreeMap;
use std::io::Write;
use std::net::{TcpListener, TcpStream};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::sensing::{SensorConfig, StackedObservation};
use crate::vehicle::ControlCommand;
use protocol::{Message, ProtocolError, WireContext, WireStack, PROTOCOL_VERSION};

/// Action space of a controller, selecting how commands are interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ActionSpace {
    Continuous,
    ActuatorDynamic,
    Trajectory,
    LaneFollowing,
    /// keep_lane / slow_down / turn_left / turn_right, adapted to LaneFollowing.
    Discrete4,
}

impl ActionSpace {
    pub fn name(&self) -> &'static str {
        match self {
            ActionSpace::Continuous => "Continuous",
            ActionSpace::ActuatorDynamic => "ActuatorDynamic",
            ActionSpace::Trajectory => "Trajectory",
            ActionSpace::LaneFollowing => "LaneFollowing",
            ActionSpace::Discrete4 => "Discrete4",
        }
    }
}

/// The four discrete driving actions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscreteAction {
    KeepLane,
    SlowDown,
    TurnLeft,
    TurnRight,
}

/// An agent's output, either a raw command or a discrete symbol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "space", content = "value")]
pub enum Action {
    Command(ControlCommand),
    Discrete(DiscreteAction),
}

/// Per-step facts a stateless policy may use besides the observation.
#[derive(Debug, Clone, Copy)]
pub struct PolicyContext {
    pub lane_speed_limit: f64,
    pub speed: f64,
    /// Target speed currently tracked by the lane-following controller.
    pub current_target_speed: f64,
    /// IDM time headway, used by gap heuristics.
    pub time_headway: f64,
}

impl PolicyContext {
    pub fn to_wire(&self) -> WireContext {
        WireContext {
            lane_speed_limit: self.lane_speed_limit,
            speed: self.speed,
            current_target_speed: self.current_target_speed,
            time_headway: self.time_headway,
        }
    }

    pub fn from_wire(w: &WireContext) -> Self {
        PolicyContext {
            lane_speed_limit: w.lane_speed_limit,
            speed: w.speed,
            current_target_speed: w.current_target_speed,
            time_headway: w.time_headway,
        }
    }
}

/// Map a discrete action onto a lane-following command.
pub fn discrete_action_adapter(action: DiscreteAction, ctx: &PolicyContext) -> ControlCommand {
    match action {
        DiscreteAction::KeepLane => ControlCommand::LaneFollowing {
            target_speed: ctx.lane_speed_limit,
            lane_change: 0,
        },
        DiscreteAction::SlowDown => ControlCommand::LaneFollowing {
            target_speed: (ctx.speed - 2.5).max(0.0),
            lane_change: 0,
        },
        DiscreteAction::TurnLeft => ControlCommand::LaneFollowing {
            target_speed: ctx.current_target_speed,
            lane_change: 1,
        },
        DiscreteAction::TurnRight => ControlCommand::LaneFollowing {
            target_speed: ctx.current_target_speed,
            lane_change: -1,
        },
    }
}

/// A behavior policy: observation (after the observation adapter) to action.
pub trait Policy: Send {
    fn act(&mut self, obs: &StackedObservation, ctx: &PolicyContext) -> Action;
}

/// Drives at the lane speed limit, never changes lane.
struct KeepLane;

impl Policy for KeepLane {
    fn act(&mut self, _obs: &StackedObservation, ctx: &PolicyContext) -> Action {
        Action::Command(ControlCommand::LaneFollowing {
            target_speed: ctx.lane_speed_limit,
            lane_change: 0,
        })
    }
}

/// Discrete rule: slow down whenever the nearest same-lane forward neighbor
/// is closer than 2 * speed * T, otherwise keep lane.
struct ConservativeRule;

impl Policy for ConservativeRule {
    fn act(&mut self, obs: &StackedObservation, ctx: &PolicyContext) -> Action {
        let frame = obs.latest();
        let threshold = 2.0 * ctx.speed * ctx.time_headway;
        let blocked = frame.neighbors.iter().any(|n| {
            let (dx, dy) = n.rel_position;
            dx > 0.0 && dy.abs() < 1.8 && n.rel_distance < threshold
        });
        Action::Discrete(if blocked {
            DiscreteAction::SlowDown
        } else {
            DiscreteAction::KeepLane
        })
    }
}

/// Always brakes to a stop. Useful as a worst-case interaction partner.
struct FullStop;

impl Policy for FullStop {
    fn act(&mut self, _obs: &StackedObservation, _ctx: &PolicyContext) -> Action {
        Action::Command(ControlCommand::LaneFollowing {
            target_speed: 0.0,
            lane_change: 0,
        })
    }
}

/// Interface requested from the simulator for one agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentInterface {
    pub sensors: SensorConfig,
    pub action_space: ActionSpace,
    #[serde(default)]
    pub max_episode_steps: Option<u32>,
}

impl AgentInterface {
    pub fn lane_follower() -> Self {
        AgentInterface {
            sensors: SensorConfig {
                bev: false,
                ..Default::default()
            },
            action_space: ActionSpace::LaneFollowing,
            max_episode_steps: None,
        }
    }

    pub fn discrete() -> Self {
        AgentInterface {
            sensors: SensorConfig {
                bev: false,
                ..Default::default()
            },
            action_space: ActionSpace::Discrete4,
            max_episode_steps: None,
        }
    }
}

/// Where a policy comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "ref")]
pub enum PolicyRef {
    /// Built-in zoo policy by name.
    Zoo(String),
    /// Remote endpoint, "host:port".
    Remote(String),
}

/// Named transforms around a policy. All default to identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterSet {
    pub observation_adapter: String,
    pub action_adapter: String,
    pub reward_adapter: String,
    pub info_adapter: String,
}

impl Default for AdapterSet {
    fn default() -> Self {
        AdapterSet {
            observation_adapter: "identity".into(),
            action_adapter: "identity".into(),
            reward_adapter: "identity".into(),
            info_adapter: "identity".into(),
        }
    }
}

/// Everything needed to build a concrete agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentSpec {
    pub interface: AgentInterface,
    pub policy_ref: PolicyRef,
    #[serde(default)]
    pub adapters: AdapterSet,
}

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("unknown zoo policy `{0}`")]
    UnknownPolicy(String),
    #[error("unknown adapter `{0}`")]
    UnknownAdapter(String),
    #[error("remote connect to {0} failed after {1} attempts: {2}")]
    Connect(String, u32, String),
    #[error("protocol: {0}")]
    Protocol(#[from] ProtocolError),
}

/// One zoo entry: a named policy factory plus its default interface.
pub struct ZooEntry {
    pub name: String,
    pub description: String,
    pub author: String,
    pub interface: AgentInterface,
    factory: fn() -> Box<dyn Policy>,
}

/// In-process registry of social-agent policies, plus named endpoints loaded
/// from manifest files.
pub struct Zoo {
    entries: BTreeMap<String, ZooEntry>,
    endpoints: BTreeMap<String, String>,
}

impl Zoo {
    /// The built-in scripted policies.
    pub fn standard() -> Self {
        let mut zoo = Zoo {
            entries: BTreeMap::new(),
            endpoints: BTreeMap::new(),
        };
        zoo.register(
            "keep_lane",
            "drives at the lane speed limit, never changes lane",
            AgentInterface::lane_follower(),
            || Box::new(KeepLane),
        );
        zoo.register(
            "conservative_rule",
            "slows when the same-lane forward gap is under 2*speed*T",
            AgentInterface::discrete(),
            || Box::new(ConservativeRule),
        );
        zoo.register(
            "full_stop",
            "brakes to a standstill and stays there",
            AgentInterface::lane_follower(),
            || Box::new(FullStop),
        );
        zoo
    }

    pub fn register(
        &mut self,
        name: &str,
        description: &str,
        interface: AgentInterface,
        factory: fn() -> Box<dyn Policy>,
    ) {
        self.entries.insert(
            name.to_string(),
            ZooEntry {
                name: name.to_string(),
                description: description.to_string(),
                author: "built-in".to_string(),
                interface,
                factory,
            },
        );
    }

    /// Register remote endpoints from a manifest: JSON object name -> host:port.
    pub fn load_endpoint_manifest(&mut self, json: &str) -> Result<(), String> {
        let map: BTreeMap<String, String> =
            serde_json::from_str(json).map_err(|e| e.to_string())?;
        self.endpoints.extend(map);
        Ok(())
    }

    pub fn names(&self) -> Vec<&str> {
        self.entries.keys().map(|s| s.as_str()).collect()
    }

    pub fn entry(&self, name: &str) -> Option<&ZooEntry> {
        self.entries.get(name)
    }

    /// Resolve a policy reference string: a zoo name, `remote:host:port`, or
    /// a manifest endpoint name.
    pub fn resolve(&self, reference: &str) -> Result<AgentSpec, AgentError> {
        if let Some(addr) = reference.strip_prefix("remote:") {
            return Ok(AgentSpec {
                interface: AgentInterface::lane_follower(),
                policy_ref: PolicyRef::Remote(addr.to_string()),
                adapters: AdapterSet::default(),
            });
        }
        if let Some(entry) = self.entries.get(reference) {
            return Ok(AgentSpec {
                interface: entry.interface.clone(),
                policy_ref: PolicyRef::Zoo(reference.to_string()),
                adapters: AdapterSet::default(),
            });
        }
        if let Some(addr) = self.endpoints.get(reference) {
            return Ok(AgentSpec {
                interface: AgentInterface::lane_follower(),
                policy_ref: PolicyRef::Remote(addr.clone()),
                adapters: AdapterSet::default(),
            });
        }
        Err(AgentError::UnknownPolicy(reference.to_string()))
    }
}

// --- adapters -----------------------------------------------------------------

fn observation_adapter(name: &str) -> Result<fn(StackedObservation) -> StackedObservation, AgentError> {
    match name {
        "identity" => Ok(|o| o),
        "no_bev" => Ok(|mut o| {
            for f in o.frames.iter_mut() {
                f.bev = None;
            }
            o
        }),
        other => Err(AgentError::UnknownAdapter(other.to_string())),
    }
}

fn action_adapter(name: &str) -> Result<fn(Action) -> Action, AgentError> {
    match name {
        "identity" => Ok(|a| a),
        other => Err(AgentError::UnknownAdapter(other.to_string())),
    }
}

fn reward_adapter(name: &str) -> Result<fn(&StackedObservation, f64) -> f64, AgentError> {
    match name {
        "identity" => Ok(|_, r| r),
        other => Err(AgentError::UnknownAdapter(other.to_string())),
    }
}

fn validate_info_adapter(name: &str) -> Result<(), AgentError> {
    match name {
        "identity" => Ok(()),
        other => Err(AgentError::UnknownAdapter(other.to_string())),
    }
}

// --- sessions -----------------------------------------------------------------

/// Settings for remote sessions. The timeout default honors AGENT_TIMEOUT_MS.
#[derive(Debug, Clone)]
pub struct RemoteConfig {
    pub timeout: Duration,
    pub connect_retries: u32,
}

impl Default for RemoteConfig {
    fn default() -> Self {
        let ms = std::env::var("AGENT_TIMEOUT_MS")
            .ok()
            .and_then(|v| v.parse::<u64>().ok())
            .unwrap_or(1000);
        RemoteConfig {
            timeout: Duration::from_millis(ms),
            connect_retries: 3,
        }
    }
}

/// Open lockstep session to one remote agent: one request in flight.
pub struct RemoteSession {
    stream: TcpStream,
    addr: String,
    /// Step of the next expected reply; stale replies are drained.
    last_step: u64,
    pub protocol_errors: u32,
}

impl std::fmt::Debug for RemoteSession {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemoteSession")
            .field("addr", &self.addr)
            .field("protocol_errors", &self.protocol_errors)
            .finish()
    }
}

impl RemoteSession {
    pub fn connect(
        addr: &str,
        action_space: ActionSpace,
        config: &RemoteConfig,
    ) -> Result<Self, AgentError> {
        let mut last_err = String::new();
        for attempt in 0..config.connect_retries.max(1) {
            match TcpStream::connect(addr) {
                Ok(mut stream) => {
                    stream.set_nodelay(true).ok();
                    stream.set_read_timeout(Some(config.timeout)).ok();
                    protocol::send(
                        &mut stream,
                        &Message::Hello {
                            version: PROTOCOL_VERSION,
                            action_space: Some(action_space.name().to_string()),
                            capabilities: None,
                        },
                    )?;
                    match protocol::recv(&mut stream) {
                        Ok(Message::Hello { version, .. }) if version == PROTOCOL_VERSION => {
                            return Ok(RemoteSession {
                                stream,
                                addr: addr.to_string(),
                                last_step: 0,
                                protocol_errors: 0,
                            });
                        }
                        Ok(Message::Hello { version, .. }) => {
                            return Err(AgentError::Protocol(ProtocolError::Version(version)));
                        }
                        Ok(_) => return Err(AgentError::Protocol(ProtocolError::Unexpected)),
                        Err(e) => last_err = e.to_string(),
                    }
                }
                Err(e) => last_err = e.to_string(),
            }
            std::thread::sleep(Duration::from_millis(50 * (attempt as u64 + 1)));
        }
        Err(AgentError::Connect(
            addr.to_string(),
            config.connect_retries,
            last_err,
        ))
    }

    /// One observation/action exchange. On timeout or a malformed reply the
    /// session substitutes the safest action for the space (maximal braking)
    /// and reports it in the flags.
    pub fn exchange(
        &mut self,
        step: u64,
        obs: &StackedObservation,
        ctx: &PolicyContext,
        space: ActionSpace,
    ) -> (Action, bool) {
        self.last_step = step;
        let msg = Message::Obs {
            step,
            observation: WireStack::from_stack(obs),
            context: ctx.to_wire(),
        };
        if protocol::send(&mut self.stream, &msg).is_err() {
            self.protocol_errors += 1;
            return (substitute_action(space), true);
        }
        loop {
            match protocol::recv(&mut self.stream) {
                Ok(Message::Act {
                    step: reply_step,
                    action,
                }) => {
                    if reply_step < step {
                        continue; // stale reply from a timed-out step
                    }
                    if reply_step != step {
                        self.protocol_errors += 1;
                        return (substitute_action(space), true);
                    }
                    return match validate_action(&action, space) {
                        Ok(()) => (action, false),
                        Err(_) => {
                            self.protocol_errors += 1;
                            (substitute_action(space), true)
                        }
                    };
                }
                Ok(Message::Bye) | Ok(Message::Hello { .. }) | Ok(Message::Obs { .. }) => {
                    self.protocol_errors += 1;
                    return (substitute_action(space), true);
                }
                Err(_) => {
                    // timeout or malformed frame
                    self.protocol_errors += 1;
                    return (substitute_action(space), true);
                }
            }
        }
    }

    pub fn close(&mut self) {
        let _ = protocol::send(&mut self.stream, &Message::Bye);
        let _ = self.stream.shutdown(std::net::Shutdown::Both);
    }
}

/// Safest in-range action for the space: maximal braking / slow down.
pub fn substitute_action(space: ActionSpace) -> Action {
    match space {
        ActionSpace::Continuous => Action::Command(ControlCommand::Continuous {
            throttle: 0.0,
            brake: 1.0,
            steering: 0.0,
        }),
        ActionSpace::ActuatorDynamic => Action::Command(ControlCommand::ActuatorDynamic {
            throttle: 0.0,
            brake: 1.0,
            steering_rate: 0.0,
        }),
        ActionSpace::Trajectory => Action::Command(ControlCommand::Trajectory { points: vec![] }),
        ActionSpace::LaneFollowing => Action::Command(ControlCommand::LaneFollowing {
            target_speed: 0.0,
            lane_change: 0,
        }),
        ActionSpace::Discrete4 => Action::Discrete(DiscreteAction::SlowDown),
    }
}

/// Range-validate a decoded action against the session's action space.
pub fn validate_action(action: &Action, space: ActionSpace) -> Result<(), String> {
    match (action, space) {
        (Action::Discrete(_), ActionSpace::Discrete4) => Ok(()),
        (Action::Command(ControlCommand::Continuous { throttle, brake, steering }), ActionSpace::Continuous) => {
            let ok = (0.0..=1.0).contains(throttle)
                && (0.0..=1.0).contains(brake)
                && (-1.0..=1.0).contains(steering);
            if ok {
                Ok(())
            } else {
                Err("continuous command out of range".into())
            }
        }
        (Action::Command(ControlCommand::ActuatorDynamic { throttle, brake, .. }), ActionSpace::ActuatorDynamic) => {
            if (0.0..=1.0).contains(throttle) && (0.0..=1.0).contains(brake) {
                Ok(())
            } else {
                Err("actuator command out of range".into())
            }
        }
        (Action::Command(ControlCommand::Trajectory { points }), ActionSpace::Trajectory) => {
            let increasing = points.windows(2).all(|w| w[1].time > w[0].time);
            if increasing {
                Ok(())
            } else {
                Err("trajectory times must strictly increase".into())
            }
        }
        (Action::Command(ControlCommand::LaneFollowing { target_speed, lane_change }), ActionSpace::LaneFollowing) => {
            if *target_speed >= 0.0 && (-1..=1).contains(lane_change) {
                Ok(())
            } else {
                Err("lane-following command out of range".into())
            }
        }
        _ => Err(format!("action does not match space {}", space.name())),
    }
}

enum InstanceKind {
    InProcess(Box<dyn Policy>),
    Remote(RemoteSession),
}

/// A built agent: adapters, policy (local or remote), action-space plumbing.
pub struct AgentInstance {
    pub instance_id: String,
    pub interface: AgentInterface,
    kind: InstanceKind,
    obs_adapter: fn(StackedObservation) -> StackedObservation,
    act_adapter: fn(Action) -> Action,
    reward_fn: fn(&StackedObservation, f64) -> f64,
}

impl std::fmt::Debug for AgentInstance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("AgentInstance")
            .field("instance_id", &self.instance_id)
            .finish()
    }
}

impl AgentInstance {
    /// Did this instance open a remote session?
    pub fn is_remote(&self) -> bool {
        matches!(self.kind, InstanceKind::Remote(_))
    }

    /// Ask the agent for an action. The bool flags a substitution (remote
    /// timeout / malformed reply).
    pub fn act(&mut self, step: u64, obs: &StackedObservation, ctx: &PolicyContext) -> (Action, bool) {
        let adapted = (self.obs_adapter)(obs.clone());
        let (action, substituted) = match &mut self.kind {
            InstanceKind::InProcess(policy) => (policy.act(&adapted, ctx), false),
            InstanceKind::Remote(session) => {
                session.exchange(step, &adapted, ctx, self.interface.action_space)
            }
        };
        ((self.act_adapter)(action), substituted)
    }

    /// Apply the reward adapter (sees the adapted observation and raw reward).
    pub fn adapt_reward(&self, obs: &StackedObservation, reward: f64) -> f64 {
        (self.reward_fn)(obs, reward)
    }

    pub fn close(&mut self) {
        if let InstanceKind::Remote(session) = &mut self.kind {
            session.close();
        }
    }
}

/// Build a concrete agent from its spec. Remote specs open a protocol session
/// (3 connect retries).
pub fn build_agent(
    spec: &AgentSpec,
    zoo: &Zoo,
    instance_id: String,
    remote_config: &RemoteConfig,
) -> Result<AgentInstance, AgentError> {
    let obs_adapter = observation_adapter(&spec.adapters.observation_adapter)?;
    let act_adapter = action_adapter(&spec.adapters.action_adapter)?;
    let reward_fn = reward_adapter(&spec.adapters.reward_adapter)?;
    validate_info_adapter(&spec.adapters.info_adapter)?;
    let kind = match &spec.policy_ref {
        PolicyRef::Zoo(name) => {
            let entry = zoo
                .entry(name)
                .ok_or_else(|| AgentError::UnknownPolicy(name.clone()))?;
            InstanceKind::InProcess((entry.factory)())
        }
        PolicyRef::Remote(addr) => InstanceKind::Remote(RemoteSession::connect(
            addr,
            spec.interface.action_space,
            remote_config,
        )?),
    };
    Ok(AgentInstance {
        instance_id,
        interface: spec.interface.clone(),
        kind,
        obs_adapter,
        act_adapter,
        reward_fn,
    })
}

// --- agent server ---------------------------------------------------------------

/// Serve a zoo policy over the wire protocol. Each connection gets a fresh
/// policy instance; sessions run until BYE or EOF.
pub fn serve_policy(listener: TcpListener, zoo: &Zoo, policy_name: &str) -> Result<(), AgentError> {
    let entry = zoo
        .entry(policy_name)
        .ok_or_else(|| AgentError::UnknownPolicy(policy_name.to_string()))?;
    let factory = entry.factory;
    for stream in listener.incoming() {
        let Ok(stream) = stream else { continue };
        std::thread::spawn(move || {
            let _ = serve_session(stream, factory());
        });
    }
    Ok(())
}

/// Handle one protocol session with the given policy.
pub fn serve_session(mut stream: TcpStream, mut policy: Box<dyn Policy>) -> Result<(), ProtocolError> {
    stream.set_nodelay(true).ok();
    match protocol::recv(&mut stream)? {
        Message::Hello { version, .. } => {
            if version != PROTOCOL_VERSION {
                return Err(ProtocolError::Version(version));
            }
            protocol::send(
                &mut stream,
                &Message::Hello {
                    version: PROTOCOL_VERSION,
                    action_space: None,
                    capabilities: Some(protocol::Capabilities {
                        action_spaces: vec![
                            "Continuous".into(),
                            "ActuatorDynamic".into(),
                            "Trajectory".into(),
                            "LaneFollowing".into(),
                            "Discrete4".into(),
                        ],
                    }),
                },
            )?;
        }
        _ => return Err(ProtocolError::Unexpected),
    }
    loop {
        match protocol::recv(&mut stream) {
            Ok(Message::Obs {
                step,
                observation,
                context,
            }) => {
                let obs = observation.to_stack()?;
                let ctx = PolicyContext::from_wire(&context);
                let action = policy.act(&obs, &ctx);
                protocol::send(&mut stream, &Message::Act { step, action })?;
            }
            Ok(Message::Bye) | Err(ProtocolError::Io(_)) => return Ok(()),
            Ok(_) => return Err(ProtocolError::Unexpected),
            Err(e) => return Err(e),
        }
    }
}

/// Spawn a loopback agent server on an ephemeral port; returns its address.
pub fn spawn_local_server(zoo_name: &'static str) -> std::io::Result<String> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?.to_string();
    std::thread::spawn(move || {
        let zoo = Zoo::standard();
        let _ = serve_policy(listener, &zoo, zoo_name);
    });
    Ok(addr)
}

/// A server that accepts one session and never replies to OBS messages,
/// exercising the timeout substitution path.
pub fn spawn_silent_server() -> std::io::Result<String> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?.to_string();
    std::thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { continue };
            std::thread::spawn(move || {
                if let Ok(Message::Hello { .. }) = protocol::recv(&mut stream) {
                    let _ = protocol::send(
                        &mut stream,
                        &Message::Hello {
                            version: PROTOCOL_VERSION,
                            action_space: None,
                            capabilities: None,
                        },
                    );
                }
                // swallow everything else
                loop {
                    match protocol::recv(&mut stream) {
                        Ok(Message::Bye) | Err(_) => break,
                        Ok(_) => {}
                    }
                }
            });
        }
    });
    Ok(addr)
}

impl Write for RemoteSession {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.stream.write(buf)
    }
    fn flush(&mut self) -> std::io::Result<()> {
        self.stream.flush()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sensing::{NeighborObs, ObservationFrame};

    fn quiet_frame(speed: f64) -> ObservationFrame {
        ObservationFrame {
            goal_rel: (50.0, 0.0),
            dist_to_center: 0.0,
            speed,
            steering: 0.0,
            heading_errors: vec![0.0; 10],
            neighbors: vec![],
            bev: None,
        }
    }

    fn stack_of(frame: ObservationFrame) -> StackedObservation {
        StackedObservation {
            frames: [frame.clone(), frame.clone(), frame],
        }
    }

    fn ctx(speed: f64, limit: f64) -> PolicyContext {
        PolicyContext {
            lane_speed_limit: limit,
            speed,
            current_target_speed: limit,
            time_headway: 1.5,
        }
    }

    #[test]
    fn keep_lane_always_targets_the_limit() {
        let zoo = Zoo::standard();
        let spec = zoo.resolve("keep_lane").unwrap();
        let mut agent =
            build_agent(&spec, &zoo, "k#1".into(), &RemoteConfig::default()).unwrap();
        for speed in [0.0, 5.0, 13.0] {
            let (action, substituted) =
                agent.act(0, &stack_of(quiet_frame(speed)), &ctx(speed, 13.9));
            assert!(!substituted);
            assert_eq!(
                action,
                Action::Command(ControlCommand::LaneFollowing {
                    target_speed: 13.9,
                    lane_change: 0
                })
            );
        }
    }

    #[test]
    fn conservative_rule_slows_behind_close_leader() {
        let zoo = Zoo::standard();
        let spec = zoo.resolve("conservative_rule").unwrap();
        let mut agent =
            build_agent(&spec, &zoo, "c#1".into(), &RemoteConfig::default()).unwrap();
        let mut frame = quiet_frame(10.0);
        frame.neighbors.push(NeighborObs {
            rel_distance: 20.0,
            speed: 5.0,
            rel_position: (20.0, 0.0),
        });
        // threshold 2 * 10 * 1.5 = 30 > 20: blocked
        let (action, _) = agent.act(0, &stack_of(frame.clone()), &ctx(10.0, 13.9));
        assert_eq!(action, Action::Discrete(DiscreteAction::SlowDown));
        // far leader: keep lane
        frame.neighbors[0].rel_distance = 40.0;
        frame.neighbors[0].rel_position = (40.0, 0.0);
        let (action, _) = agent.act(1, &stack_of(frame), &ctx(10.0, 13.9));
        assert_eq!(action, Action::Discrete(DiscreteAction::KeepLane));
    }

    #[test]
    fn unknown_policy_is_a_bind_error() {
        let zoo = Zoo::standard();
        assert!(matches!(
            zoo.resolve("nope"),
            Err(AgentError::UnknownPolicy(_))
        ));
    }

    #[test]
    fn discrete_adapter_mapping() {
        let c = ctx(1.0, 13.9);
        assert_eq!(
            discrete_action_adapter(DiscreteAction::SlowDown, &c),
            ControlCommand::LaneFollowing {
                target_speed: 0.0,
                lane_change: 0
            },
            "slow_down clamps at zero"
        );
        assert_eq!(
            discrete_action_adapter(DiscreteAction::KeepLane, &c),
            ControlCommand::LaneFollowing {
                target_speed: 13.9,
                lane_change: 0
            }
        );
        assert_eq!(
            discrete_action_adapter(DiscreteAction::TurnLeft, &c),
            ControlCommand::LaneFollowing {
                target_speed: 13.9,
                lane_change: 1
            }
        );
        assert_eq!(
            discrete_action_adapter(DiscreteAction::TurnRight, &c),
            ControlCommand::LaneFollowing {
                target_speed: 13.9,
                lane_change: -1
            }
        );
    }

    #[test]
    fn substitutions_are_always_in_range() {
        for space in [
            ActionSpace::Continuous,
            ActionSpace::ActuatorDynamic,
            ActionSpace::Trajectory,
            ActionSpace::LaneFollowing,
            ActionSpace::Discrete4,
        ] {
            let action = substitute_action(space);
            assert!(validate_action(&action, space).is_ok(), "{space:?}");
        }
    }

    #[test]
    fn action_encoding_round_trips() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        for _ in 0..1000 {
            let action = match rng.gen_range(0..5) {
                0 => Action::Command(ControlCommand::Continuous {
                    throttle: rng.gen(),
                    brake: rng.gen(),
                    steering: rng.gen_range(-1.0..1.0),
                }),
                1 => Action::Command(ControlCommand::ActuatorDynamic {
                    throttle: rng.gen(),
                    brake: rng.gen(),
                    steering_rate: rng.gen_range(-1.0..1.0),
                }),
                2 => Action::Command(ControlCommand::LaneFollowing {
                    target_speed: rng.gen_range(0.0..30.0),
                    lane_change: rng.gen_range(-1..=1),
                }),
                3 => Action::Command(ControlCommand::Trajectory {
                    points: (0..rng.gen_range(0..5))
                        .map(|i| crate::vehicle::TrajectoryPoint {
                            x: rng.gen_range(-10.0..10.0),
                            y: rng.gen_range(-10.0..10.0),
                            heading: rng.gen_range(-3.0..3.0),
                            speed: rng.gen_range(0.0..20.0),
                            time: i as f64,
                        })
                        .collect(),
                }),
                _ => Action::Discrete(match rng.gen_range(0..4) {
                    0 => DiscreteAction::KeepLane,
                    1 => DiscreteAction::SlowDown,
                    2 => DiscreteAction::TurnLeft,
                    _ => DiscreteAction::TurnRight,
                }),
            };
            let encoded = serde_json::to_string(&action).unwrap();
            let decoded: Action = serde_json::from_str(&encoded).unwrap();
            assert_eq!(decoded, action);
        }
    }

    #[test]
    fn remote_echo_agent_returns_keep_lane_every_step() {
        let addr = spawn_local_server("keep_lane").unwrap();
        let zoo = Zoo::standard();
        let spec = AgentSpec {
            interface: AgentInterface::lane_follower(),
            policy_ref: PolicyRef::Remote(addr),
            adapters: AdapterSet::default(),
        };
        let mut agent =
            build_agent(&spec, &zoo, "r#1".into(), &RemoteConfig::default()).unwrap();
        assert!(agent.is_remote());
        for step in 0..10 {
            let (action, substituted) =
                agent.act(step, &stack_of(quiet_frame(5.0)), &ctx(5.0, 13.9));
            assert!(!substituted);
            assert_eq!(
                action,
                Action::Command(ControlCommand::LaneFollowing {
                    target_speed: 13.9,
                    lane_change: 0
                })
            );
        }
        agent.close();
    }

    #[test]
    fn silent_remote_triggers_braking_substitution() {
        let addr = spawn_silent_server().unwrap();
        let zoo = Zoo::standard();
        let spec = AgentSpec {
            interface: AgentInterface::lane_follower(),
            policy_ref: PolicyRef::Remote(addr),
            adapters: AdapterSet::default(),
        };
        let config = RemoteConfig {
            timeout: Duration::from_millis(100),
            connect_retries: 3,
        };
        let mut agent = build_agent(&spec, &zoo, "r#2".into(), &config).unwrap();
        let (action, substituted) = agent.act(0, &stack_of(quiet_frame(5.0)), &ctx(5.0, 13.9));
        assert!(substituted);
        assert_eq!(
            action,
            Action::Command(ControlCommand::LaneFollowing {
                target_speed: 0.0,
                lane_change: 0
            })
        );
        agent.close();
    }

    #[test]
    fn connect_to_dead_endpoint_fails_after_retries() {
        let zoo = Zoo::standard();
        let spec = AgentSpec {
            interface: AgentInterface::lane_follower(),
            policy_ref: PolicyRef::Remote("127.0.0.1:1".into()),
            adapters: AdapterSet::default(),
        };
        let config = RemoteConfig {
            timeout: Duration::from_millis(50),
            connect_retries: 3,
        };
        match build_agent(&spec, &zoo, "r#3".into(), &config) {
            Err(AgentError::Connect(_, retries, _)) => assert_eq!(retries, 3),
            other => panic!("expected connect failure, got {other:?}"),
        }
    }

    #[test]
    fn endpoint_manifest_resolves_names() {
        let mut zoo = Zoo::standard();
        zoo.load_endpoint_manifest(r#"{"lab_agent": "10.0.0.5:7000"}"#)
            .unwrap();
        let spec = zoo.resolve("lab_agent").unwrap();
        assert_eq!(spec.policy_ref, PolicyRef::Remote("10.0.0.5:7000".into()));
    }

    #[test]
    fn no_bev_adapter_strips_grids() {
        let zoo = Zoo::standard();
        let mut spec = zoo.resolve("keep_lane").unwrap();
        spec.adapters.observation_adapter = "no_bev".into();
        let agent = build_agent(&spec, &zoo, "k#2".into(), &RemoteConfig::default()).unwrap();
        let mut frame = quiet_frame(5.0);
        frame.bev = Some(crate::sensing::BevGrid {
            size: 2,
            resolution: 0.5,
            data: vec![0; 4],
        });
        let adapted = (agent.obs_adapter)(stack_of(frame));
        assert!(adapted.frames.iter().all(|f| f.bev.is_none()));
    }

    #[test]
    fn unknown_adapter_is_a_bind_error() {
        let zoo = Zoo::standard();
        let mut spec = zoo.resolve("keep_lane").unwrap();
        spec.adapters.action_adapter = "mystery".into();
        assert!(matches!(
            build_agent(&spec, &zoo, "x".into(), &RemoteConfig::default()),
            Err(AgentError::UnknownAdapter(_))
        ));
    }
}
