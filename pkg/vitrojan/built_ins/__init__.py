from .baseline_plugin import BaselineCommand
from .config_plugin import ConfigCommand
from .cost_plugin import CostCommand
from .evaluate_plugin import EvaluateCommand
from .gen_trigger_plugin import GenTriggerCommand
from .inject_plugin import InjectCommand
from .report_plugin import ReportCommand
from .run_all_plugin import RunAllCommand
from .train_clean_plugin import TrainCleanCommand

BuiltinSubcommands = [
    TrainCleanCommand,
    GenTriggerCommand,
    InjectCommand,
    EvaluateCommand,
    ReportCommand,
    RunAllCommand,
    BaselineCommand,
    CostCommand,
    ConfigCommand,
]
