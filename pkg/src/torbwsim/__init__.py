"""torbwsim: simulation and forensics for bandwidth-scanner inflation attacks.

Subsystems:
  core        shared domain types and consensus aggregation
  scanner     SBWS-style two-hop measurement logic
  netsim      discrete-event simulation of hosts, flows, and attack policies
  bwfile      bandwidth-file wire format and timeline inference
  coincidence co-measurement event counting and expected inflation
  estimator   attack-resource arithmetic (inflation curve, server counts)
  defense     co-measurement anomaly scoring and active probe planning
  cli         command-line front end
"""

__version__ = "0.1.0"
