from app.cli.commands import ablate, calibrate, dump_features, evaluate, finetune, phantom_gen, pretrain

# subcommand modules in pipeline order
COMMANDS = [phantom_gen, pretrain, finetune, calibrate, evaluate, ablate, dump_features]

__all__ = ["COMMANDS"]
