//! Simulated physical hosts and the VMs they run.
//!
//! A host keeps a resource ledger (memory held by VMs, disk held by prepared
//! images, the VM table) whose canonical rendering is what "restored to a
//! clean state" is checked against. CPU is handed out either by an auctioneer
//! (market hosts) or by fixed vCPU reservations.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::market::HostCapacity;
use crate::simnet::envelope::canonical_json;
use crate::time::SimTime;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HostError {
    #[error("unknown host `{0}`")]
    UnknownHost(String),
    #[error("unknown vm `{0}`")]
    UnknownVm(String),
    #[error("vm `{0}` already exists")]
    DuplicateVm(String),
    #[error("host `{host}` has {free} MiB memory free, {wanted} MiB requested")]
    InsufficientMemory { host: String, free: u64, wanted: u64 },
    #[error("host `{host}` has {free} MiB disk free, {wanted} MiB requested")]
    InsufficientDisk { host: String, free: u64, wanted: u64 },
    #[error("host `{host}` cannot reserve {wanted} cpu units ({free} free)")]
    InsufficientCpu { host: String, free: f64, wanted: f64 },
    #[error("image token `{0}` already prepared")]
    DuplicateImage(String),
    #[error("vm `{vm}` is {state}, cannot {action}")]
    BadState { vm: String, state: VmState, action: &'static str },
    #[error("invalid vm spec: {0}")]
    InvalidSpec(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum VmState {
    Provisioning,
    Booting,
    Running,
    Terminating,
    Dead,
}

impl fmt::Display for VmState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            VmState::Provisioning => "PROVISIONING",
            VmState::Booting => "BOOTING",
            VmState::Running => "RUNNING",
            VmState::Terminating => "TERMINATING",
            VmState::Dead => "DEAD",
        };
        f.write_str(s)
    }
}

/// Resources a VM asks for. Sizes are MiB.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VmSpec {
    pub vcpus: u32,
    pub memory: u64,
    pub image: String,
    pub disk: u64,
    pub swap: u64,
}

impl VmSpec {
    pub fn validate(&self) -> Result<(), HostError> {
        if self.vcpus == 0 {
            return Err(HostError::InvalidSpec("vcpus must be positive".into()));
        }
        if self.memory == 0 {
            return Err(HostError::InvalidSpec("memory must be positive".into()));
        }
        if self.disk == 0 {
            return Err(HostError::InvalidSpec("disk must be positive".into()));
        }
        if self.image.is_empty() {
            return Err(HostError::InvalidSpec("image must be named".into()));
        }
        Ok(())
    }
}

impl Default for VmSpec {
    fn default() -> Self {
        VmSpec { vcpus: 1, memory: 512, image: "base".into(), disk: 1024, swap: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VmInstance {
    pub vm_id: String,
    pub host_id: String,
    pub spec: VmSpec,
    /// Endpoint notified when someone else kills or removes the VM.
    pub owner: String,
    pub state: VmState,
    pub cpu_rate: f64,
    pub accumulated_cpu_seconds: f64,
    pub ready_at: Option<SimTime>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RatePolicy {
    /// Rates are set externally by the host's auctioneer.
    Market,
    /// Each VM holds `vcpus` CPU units for its lifetime.
    Reserved,
}

#[derive(Clone, Debug)]
pub struct SimHost {
    pub host_id: String,
    pub capacity: HostCapacity,
    pub disk_total: u64,
    pub policy: RatePolicy,
    /// Default boot time for VMs on this host, seconds.
    pub boot_delay: f64,
    vms: BTreeMap<String, VmInstance>,
    images: BTreeMap<String, u64>,
}

impl SimHost {
    pub fn new(host_id: impl Into<String>, capacity: HostCapacity, disk_total: u64, policy: RatePolicy) -> Self {
        SimHost {
            host_id: host_id.into(),
            capacity,
            disk_total,
            policy,
            boot_delay: 5.0,
            vms: BTreeMap::new(),
            images: BTreeMap::new(),
        }
    }

    pub fn with_boot_delay(mut self, secs: f64) -> Self {
        self.boot_delay = secs;
        self
    }

    pub fn memory_reserved(&self) -> u64 {
        self.vms.values().map(|v| v.spec.memory).sum()
    }

    pub fn memory_free(&self) -> u64 {
        self.capacity.memory_total.saturating_sub(self.memory_reserved())
    }

    pub fn disk_free(&self) -> u64 {
        self.disk_total.saturating_sub(self.images.values().sum())
    }

    pub fn cpu_reserved(&self) -> f64 {
        self.vms.values().map(|v| v.cpu_rate).sum()
    }

    pub fn vms(&self) -> impl Iterator<Item = &VmInstance> {
        self.vms.values()
    }

    pub fn vm(&self, vm_id: &str) -> Option<&VmInstance> {
        self.vms.get(vm_id)
    }

    pub fn images(&self) -> impl Iterator<Item = (&String, &u64)> {
        self.images.iter()
    }

    /// Canonical text of the resource ledger: memory reservations, image
    /// tokens with their disk, and the VM table.
    pub fn ledger_snapshot(&self) -> String {
        let vms: BTreeMap<&String, serde_json::Value> = self
            .vms
            .iter()
            .map(|(id, vm)| (id, json!({"owner": vm.owner, "spec": vm.spec, "state": vm.state})))
            .collect();
        let images: BTreeSet<(&String, &u64)> = self.images.iter().collect();
        canonical_json(&json!({
            "host": self.host_id,
            "memory_reserved": self.memory_reserved(),
            "images": images.into_iter().map(|(t, d)| json!({"token": t, "disk": d})).collect::<Vec<_>>(),
            "vms": vms,
        }))
    }
}

/// Something a VM-table change produced that the runtime must publish.
#[derive(Clone, Debug, PartialEq)]
pub enum HostEvent {
    Changed { host_id: String, vm_id: String, state: VmState, cpu_rate: f64 },
    /// The VM left the table or died at someone else's hand; `owner` hears about it.
    Gone { host_id: String, vm_id: String, owner: String, reason: String },
}

/// All simulated hosts plus the VMs that have left them.
#[derive(Debug, Default)]
pub struct HostTable {
    hosts: BTreeMap<String, SimHost>,
    retired: BTreeMap<String, VmInstance>,
    events: Vec<HostEvent>,
}

impl HostTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a host, replacing any previous definition with the same id.
    pub fn insert(&mut self, host: SimHost) {
        self.hosts.insert(host.host_id.clone(), host);
    }

    pub fn contains(&self, host_id: &str) -> bool {
        self.hosts.contains_key(host_id)
    }

    pub fn get(&self, host_id: &str) -> Option<&SimHost> {
        self.hosts.get(host_id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &SimHost> {
        self.hosts.values()
    }

    fn host_mut(&mut self, host_id: &str) -> Result<&mut SimHost, HostError> {
        self.hosts.get_mut(host_id).ok_or_else(|| HostError::UnknownHost(host_id.to_string()))
    }

    pub fn find_vm(&self, vm_id: &str) -> Option<&VmInstance> {
        self.hosts.values().find_map(|h| h.vms.get(vm_id))
    }

    /// A live VM, or failing that the final record of a retired one.
    pub fn vm_or_retired(&self, vm_id: &str) -> Option<&VmInstance> {
        self.find_vm(vm_id).or_else(|| self.retired.get(vm_id))
    }

    pub fn retired(&self) -> impl Iterator<Item = &VmInstance> {
        self.retired.values()
    }

    fn vm_mut(&mut self, vm_id: &str) -> Result<&mut VmInstance, HostError> {
        self.hosts
            .values_mut()
            .find_map(|h| h.vms.get_mut(vm_id))
            .ok_or_else(|| HostError::UnknownVm(vm_id.to_string()))
    }

    pub fn drain_events(&mut self) -> Vec<HostEvent> {
        std::mem::take(&mut self.events)
    }

    fn changed(&mut self, vm: &VmInstance) {
        self.events.push(HostEvent::Changed {
            host_id: vm.host_id.clone(),
            vm_id: vm.vm_id.clone(),
            state: vm.state,
            cpu_rate: vm.cpu_rate,
        });
    }

    /// Reserves memory (and vCPUs on reserved hosts) for a new VM in PROVISIONING.
    pub fn create_vm(&mut self, host_id: &str, vm_id: &str, spec: VmSpec, owner: &str) -> Result<(), HostError> {
        spec.validate()?;
        if self.find_vm(vm_id).is_some() {
            return Err(HostError::DuplicateVm(vm_id.to_string()));
        }
        let host = self.host_mut(host_id)?;
        let free = host.memory_free();
        if spec.memory > free {
            return Err(HostError::InsufficientMemory { host: host_id.to_string(), free, wanted: spec.memory });
        }
        let cpu_rate = match host.policy {
            RatePolicy::Market => 0.0,
            RatePolicy::Reserved => {
                let wanted = spec.vcpus as f64;
                let free = host.capacity.cpu_capacity - host.cpu_reserved();
                if wanted > free + 1e-9 {
                    return Err(HostError::InsufficientCpu { host: host_id.to_string(), free, wanted });
                }
                wanted
            }
        };
        let vm = VmInstance {
            vm_id: vm_id.to_string(),
            host_id: host_id.to_string(),
            spec,
            owner: owner.to_string(),
            state: VmState::Provisioning,
            cpu_rate,
            accumulated_cpu_seconds: 0.0,
            ready_at: None,
        };
        host.vms.insert(vm_id.to_string(), vm.clone());
        self.changed(&vm);
        Ok(())
    }

    /// Moves a provisioned VM to BOOTING; it becomes RUNNING at the returned instant
    /// once the runtime calls [`HostTable::mark_ready`].
    pub fn start_boot(&mut self, vm_id: &str, now: SimTime, delay: f64) -> Result<SimTime, HostError> {
        let vm = self.vm_mut(vm_id)?;
        if vm.state != VmState::Provisioning {
            return Err(HostError::BadState { vm: vm_id.to_string(), state: vm.state, action: "boot" });
        }
        let ready = now.after(delay);
        vm.state = VmState::Booting;
        vm.ready_at = Some(ready);
        let vm = vm.clone();
        self.changed(&vm);
        Ok(ready)
    }

    /// Boot completion. A VM that died or left in the meantime is ignored.
    pub fn mark_ready(&mut self, vm_id: &str) -> bool {
        let Ok(vm) = self.vm_mut(vm_id) else { return false };
        if vm.state != VmState::Booting {
            return false;
        }
        vm.state = VmState::Running;
        let vm = vm.clone();
        self.changed(&vm);
        true
    }

    /// Applies auctioneer-computed rates on a market host. VMs absent from
    /// `rates` get zero.
    pub fn set_rates(&mut self, host_id: &str, rates: &BTreeMap<String, f64>) -> Result<(), HostError> {
        let host = self.host_mut(host_id)?;
        let mut touched = Vec::new();
        for vm in host.vms.values_mut() {
            let rate = if vm.state == VmState::Dead { 0.0 } else { rates.get(&vm.vm_id).copied().unwrap_or(0.0) };
            if vm.cpu_rate != rate {
                vm.cpu_rate = rate;
                touched.push(vm.clone());
            }
        }
        for vm in touched {
            self.changed(&vm);
        }
        Ok(())
    }

    /// Fault: the VM dies in place. It stays in the table (holding memory)
    /// until someone removes it.
    pub fn kill(&mut self, vm_id: &str) -> Result<(), HostError> {
        let vm = self.vm_mut(vm_id)?;
        if vm.state == VmState::Dead {
            return Ok(());
        }
        vm.state = VmState::Dead;
        vm.cpu_rate = 0.0;
        vm.ready_at = None;
        let vm = vm.clone();
        self.changed(&vm);
        self.events.push(HostEvent::Gone {
            host_id: vm.host_id.clone(),
            vm_id: vm.vm_id.clone(),
            owner: vm.owner.clone(),
            reason: "killed".into(),
        });
        Ok(())
    }

    /// Shuts a VM down and drops it from the table, releasing its memory.
    /// Returns `false` if it was already gone. The owner is told when `by`
    /// is someone else.
    pub fn remove_vm(&mut self, vm_id: &str, by: &str) -> bool {
        let Some(host) = self.hosts.values_mut().find(|h| h.vms.contains_key(vm_id)) else {
            return false;
        };
        let mut vm = host.vms.remove(vm_id).expect("checked above");
        let was_dead = vm.state == VmState::Dead;
        if !was_dead {
            vm.state = VmState::Terminating;
            vm.cpu_rate = 0.0;
            self.changed(&vm);
            vm.state = VmState::Dead;
            self.changed(&vm);
        }
        vm.ready_at = None;
        if vm.owner != by && !was_dead {
            self.events.push(HostEvent::Gone {
                host_id: vm.host_id.clone(),
                vm_id: vm.vm_id.clone(),
                owner: vm.owner.clone(),
                reason: format!("removed by {by}"),
            });
        }
        self.retired.insert(vm.vm_id.clone(), vm);
        true
    }

    /// Reserves disk for a prepared image under a unique token.
    pub fn prepare_image(&mut self, host_id: &str, token: &str, disk: u64) -> Result<(), HostError> {
        let host = self.host_mut(host_id)?;
        if host.images.contains_key(token) {
            return Err(HostError::DuplicateImage(token.to_string()));
        }
        let free = host.disk_free();
        if disk > free {
            return Err(HostError::InsufficientDisk { host: host_id.to_string(), free, wanted: disk });
        }
        host.images.insert(token.to_string(), disk);
        Ok(())
    }

    /// Releases an image token. Returns `false` if it was not present.
    pub fn cleanup_image(&mut self, host_id: &str, token: &str) -> bool {
        self.hosts.get_mut(host_id).map(|h| h.images.remove(token).is_some()).unwrap_or(false)
    }

    pub fn ledger_snapshot(&self, host_id: &str) -> Option<String> {
        self.hosts.get(host_id).map(SimHost::ledger_snapshot)
    }

    /// Adds `rate × dt` to every RUNNING VM.
    pub fn integrate(&mut self, dt_secs: f64) {
        if dt_secs <= 0.0 {
            return;
        }
        for host in self.hosts.values_mut() {
            for vm in host.vms.values_mut() {
                if vm.state == VmState::Running {
                    vm.accumulated_cpu_seconds += vm.cpu_rate * dt_secs;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(policy: RatePolicy) -> HostTable {
        let mut t = HostTable::new();
        t.insert(SimHost::new("h1", HostCapacity::new(2.0, 1024).unwrap(), 4096, policy));
        t
    }

    fn spec(memory: u64) -> VmSpec {
        VmSpec { memory, ..VmSpec::default() }
    }

    #[test]
    fn memory_admission() {
        let mut t = table(RatePolicy::Market);
        t.create_vm("h1", "a", spec(800), "o").unwrap();
        let err = t.create_vm("h1", "b", spec(300), "o").unwrap_err();
        assert!(matches!(err, HostError::InsufficientMemory { free: 224, .. }));
        assert!(t.remove_vm("a", "o"));
        assert!(!t.remove_vm("a", "o"));
        t.create_vm("h1", "b", spec(300), "o").unwrap();
    }

    #[test]
    fn reserved_policy_pins_vcpus() {
        let mut t = table(RatePolicy::Reserved);
        t.create_vm("h1", "a", VmSpec { vcpus: 2, ..spec(100) }, "o").unwrap();
        assert_eq!(t.find_vm("a").unwrap().cpu_rate, 2.0);
        assert!(matches!(t.create_vm("h1", "b", spec(100), "o"), Err(HostError::InsufficientCpu { .. })));
    }

    #[test]
    fn boot_then_integrate() {
        let mut t = table(RatePolicy::Market);
        t.create_vm("h1", "a", spec(100), "o").unwrap();
        let ready = t.start_boot("a", SimTime::ZERO, 5.0).unwrap();
        assert_eq!(ready, SimTime::from_secs(5.0));
        t.set_rates("h1", &BTreeMap::from([("a".to_string(), 1.5)])).unwrap();
        t.integrate(5.0);
        assert_eq!(t.find_vm("a").unwrap().accumulated_cpu_seconds, 0.0);
        assert!(t.mark_ready("a"));
        t.integrate(2.0);
        assert_eq!(t.find_vm("a").unwrap().accumulated_cpu_seconds, 3.0);
    }

    #[test]
    fn kill_notifies_owner_once() {
        let mut t = table(RatePolicy::Market);
        t.create_vm("h1", "a", spec(100), "auc/h1").unwrap();
        t.drain_events();
        t.kill("a").unwrap();
        t.kill("a").unwrap();
        let gone: Vec<_> = t.drain_events().into_iter().filter(|e| matches!(e, HostEvent::Gone { .. })).collect();
        assert_eq!(gone.len(), 1);
        // removing an already-dead VM is silent towards the owner
        assert!(t.remove_vm("a", "lifecycle"));
        assert!(!t.drain_events().iter().any(|e| matches!(e, HostEvent::Gone { .. })));
        assert!(t.vm_or_retired("a").is_some());
    }

    #[test]
    fn snapshot_restores_after_undo() {
        let mut t = table(RatePolicy::Reserved);
        let before = t.ledger_snapshot("h1").unwrap();
        t.prepare_image("h1", "img", 2048).unwrap();
        t.create_vm("h1", "a", spec(100), "o").unwrap();
        assert_ne!(t.ledger_snapshot("h1").unwrap(), before);
        t.remove_vm("a", "o");
        t.cleanup_image("h1", "img");
        assert_eq!(t.ledger_snapshot("h1").unwrap(), before);
    }

    #[test]
    fn disk_admission() {
        let mut t = table(RatePolicy::Reserved);
        t.prepare_image("h1", "x", 4000).unwrap();
        assert!(matches!(t.prepare_image("h1", "y", 100), Err(HostError::InsufficientDisk { .. })));
        assert!(matches!(t.prepare_image("h1", "x", 1), Err(HostError::DuplicateImage(_))));
    }
}
