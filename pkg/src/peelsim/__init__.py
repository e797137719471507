"""Desk-scale velcro peeling: simulator, tactile environment, and agents.

Modules
-------
geometry   randomized strip placement and the velcro spring-mesh model
physics    spring-damper dynamics, tendon breaking, grip and wrench sensing
env        action-level tactile peeling environment
nn         dense layers, LSTM, layer norm, RMSProp and reverse-mode autodiff
agents     scripted baselines and recurrent Q-learning agents
harness    suite generation, training/evaluation drivers and the CLI
"""

__version__ = "0.1.0"
