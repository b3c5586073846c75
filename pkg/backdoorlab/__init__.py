"""
backdoorlab - backdoor attacks and fine-tuning defenses on small image classifiers.

Trains small classifiers from scratch, implants backdoors by data poisoning,
removes them with conventional fine-tuning, fine-pruning or the two-phase
cyclic super-fine-tuning schedule, and measures attack success rate, clean
accuracy, compute cost, membership leakage and re-injection speed.

Main components:
- main.py: Orchestrator and command-line interface
- config_manager.py: Configuration loading and validation
- models.py: Pydantic config and report models
- nn_core.py / model_io.py: numpy network engine and model file format
- data.py: IDX and synthetic datasets
- attacks.py: Triggers and poisoning
- schedule.py: Learning-rate schedules
- defense.py / scenarios.py: Training runners and deployment scenarios
- evaluation.py: Clean accuracy, attack success rate, cost
- sequela.py: Membership inference and re-injection
- manifest_manager.py: Results manifest persistence
- reporting.py: CSV and SVG report emission
"""

__version__ = "0.1.0"
__author__ = "backdoorlab contributors"
