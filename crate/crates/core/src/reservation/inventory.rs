//! Lab → testbed → edge node → device hierarchy.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::ReservationError;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DeviceKind {
    RadioTransceiver,
    ComputeAccelerator,
    Other(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Device {
    pub device_id: String,
    pub kind: DeviceKind,
    pub node_id: String,
    /// Normalized position on the testbed layout map.
    pub layout_pos: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Testbed {
    pub testbed_id: String,
    pub lab_id: String,
    pub name: String,
    pub edge_nodes: Vec<String>,
    pub devices: Vec<Device>,
}

impl Testbed {
    pub fn device(&self, device_id: &str) -> Option<&Device> {
        self.devices.iter().find(|d| d.device_id == device_id)
    }

    pub fn has_node(&self, node_id: &str) -> bool {
        self.edge_nodes.iter().any(|n| n == node_id)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Lab {
    pub lab_id: String,
    pub name: String,
    pub testbeds: Vec<String>,
}

/// One lab with its resolved testbeds, as returned by [`Inventory::list`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabView {
    pub lab_id: String,
    pub name: String,
    pub testbeds: Vec<Testbed>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum InventoryFilter {
    All,
    Lab(String),
    Testbed(String),
}

/// Declarative inventory document, as read from the config file.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct InventoryConfig {
    #[serde(default)]
    pub labs: Vec<LabConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LabConfig {
    pub id: String,
    pub name: String,
    #[serde(default)]
    pub testbeds: Vec<TestbedConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TestbedConfig {
    pub id: String,
    pub name: String,
    pub edge_nodes: Vec<String>,
    #[serde(default)]
    pub devices: Vec<DeviceConfig>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeviceConfig {
    pub id: String,
    #[serde(default = "default_kind")]
    pub kind: DeviceKind,
    pub node: String,
    #[serde(default)]
    pub layout: (f64, f64),
}

fn default_kind() -> DeviceKind {
    DeviceKind::RadioTransceiver
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Inventory {
    labs: BTreeMap<String, Lab>,
    testbeds: BTreeMap<String, Testbed>,
}

impl Inventory {
    pub fn from_toml_str(doc: &str) -> Result<Self, ReservationError> {
        let config: InventoryConfig =
            toml::from_str(doc).map_err(|e| ReservationError::InvalidInventory(e.to_string()))?;
        Self::from_config(config)
    }

    pub fn from_config(config: InventoryConfig) -> Result<Self, ReservationError> {
        let invalid = |msg: String| Err(ReservationError::InvalidInventory(msg));
        let mut inventory = Inventory::default();
        for lab in config.labs {
            if inventory.labs.contains_key(&lab.id) {
                return invalid(format!("duplicate lab id {}", lab.id));
            }
            let mut testbed_ids = Vec::new();
            for tb in lab.testbeds {
                if inventory.testbeds.contains_key(&tb.id) {
                    return invalid(format!("duplicate testbed id {}", tb.id));
                }
                let mut seen = BTreeSet::new();
                let mut devices = Vec::with_capacity(tb.devices.len());
                for dev in tb.devices {
                    if !seen.insert(dev.id.clone()) {
                        return invalid(format!("duplicate device {} in {}", dev.id, tb.id));
                    }
                    if !tb.edge_nodes.contains(&dev.node) {
                        return invalid(format!(
                            "device {} references node {} outside testbed {}",
                            dev.id, dev.node, tb.id
                        ));
                    }
                    let (x, y) = dev.layout;
                    if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
                        return invalid(format!("device {} layout position out of [0,1]²", dev.id));
                    }
                    devices.push(Device {
                        device_id: dev.id,
                        kind: dev.kind,
                        node_id: dev.node,
                        layout_pos: dev.layout,
                    });
                }
                devices.sort_by(|a, b| a.device_id.cmp(&b.device_id));
                let mut edge_nodes = tb.edge_nodes;
                edge_nodes.sort();
                testbed_ids.push(tb.id.clone());
                inventory.testbeds.insert(
                    tb.id.clone(),
                    Testbed {
                        testbed_id: tb.id,
                        lab_id: lab.id.clone(),
                        name: tb.name,
                        edge_nodes,
                        devices,
                    },
                );
            }
            testbed_ids.sort();
            inventory.labs.insert(
                lab.id.clone(),
                Lab {
                    lab_id: lab.id,
                    name: lab.name,
                    testbeds: testbed_ids,
                },
            );
        }
        Ok(inventory)
    }

    pub fn testbed(&self, testbed_id: &str) -> Option<&Testbed> {
        self.testbeds.get(testbed_id)
    }

    pub fn lab(&self, lab_id: &str) -> Option<&Lab> {
        self.labs.get(lab_id)
    }

    /// Filtered hierarchy, ordered by id at every level. Labs without
    /// testbeds are not visible.
    pub fn list(&self, filter: &InventoryFilter) -> Result<Vec<LabView>, ReservationError> {
        let view = |lab: &Lab, only: Option<&str>| LabView {
            lab_id: lab.lab_id.clone(),
            name: lab.name.clone(),
            testbeds: lab
                .testbeds
                .iter()
                .filter(|id| only.is_none_or(|o| o == id.as_str()))
                .filter_map(|id| self.testbeds.get(id).cloned())
                .collect(),
        };
        match filter {
            InventoryFilter::All => Ok(self
                .labs
                .values()
                .filter(|lab| !lab.testbeds.is_empty())
                .map(|lab| view(lab, None))
                .collect()),
            InventoryFilter::Lab(id) => {
                let lab = self
                    .labs
                    .get(id)
                    .filter(|lab| !lab.testbeds.is_empty())
                    .ok_or_else(|| ReservationError::NotFound(format!("lab {id}")))?;
                Ok(vec![view(lab, None)])
            }
            InventoryFilter::Testbed(id) => {
                let tb = self
                    .testbeds
                    .get(id)
                    .ok_or_else(|| ReservationError::NotFound(format!("testbed {id}")))?;
                let lab = &self.labs[&tb.lab_id];
                Ok(vec![view(lab, Some(id))])
            }
        }
    }
}
