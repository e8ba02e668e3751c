import sys
import argparse
import signal
from jsonpath_nz import log, jprint
from trifuse.config import PRESETS, load_config
from trifuse.engine import ACTIONS, runEngine
from trifuse.util import EXIT_FAILURE, EXIT_OK, TrifuseError


#Signal handler
def signal_handler(sig, frame):
    '''Signal handler for Ctrl+C'''
    log.info('\n !!!You pressed Ctrl+C , Exiting ...... ')
    sys.exit(EXIT_FAILURE)


def _seed(text):
    value = int(text, 0)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError(f"seed must be a 64-bit unsigned integer, got {text}")
    return value


def parse_opts(argv):
    """
    Parsing command line argument for tool 'trifuse'
    """
    parser = argparse.ArgumentParser(prog="trifuse",
                                     description="Object, action and motion anomaly scoring with late fusion")
    parser.add_argument("action", choices=ACTIONS,
                        help="gen: synthetic dataset, train: lists + autoencoder + GMM, score: branch and fused "
                             "scores, eval: ROC/AUC/EER, run: train+score+eval, explain: per-target explanation dump")
    parser.add_argument("-c", "--config", type=str, default=None, help="Config: flat key = value file")
    parser.add_argument("-d", "--data", type=str, default=None,
                        help="Data: dataset root (default: the configured synthetic scene)")
    parser.add_argument("-o", "--out", type=str, default=None,
                        help="Out: output directory (default: ./trifuse_<timestamp>)")
    parser.add_argument("-s", "--seed", type=_seed, default=None, help="Seed: overrides the config seed")
    parser.add_argument("-p", "--preset", choices=sorted(PRESETS), default=None,
                        help="Preset: starting hyperparameters (default umn)")
    parser.add_argument("--plot", action="store_true", help="Plot: also write roc_plot.csv on eval")
    parser.add_argument("--abnormal-only", action="store_true",
                        help="Abnormal only: explain writes the abnormal targets only")
    return parser.parse_args(argv)


def main(argv):
    '''Run one action; returns (message, exit code)'''
    try:
        opts = parse_opts(argv)
        config = load_config(opts.config, opts.preset, opts.seed)
        result = runEngine(config, {'action': opts.action, 'data': opts.data, 'out': opts.out,
                                    'plot': opts.plot, 'abnormal_only': opts.abnormal_only})
        if opts.action in ('eval', 'run'):
            summary = result['result']
            jprint({level: {name: {'auc': entry['auc'], 'eer': entry['eer']} for name, entry in summary[level].items()}
                    for level in ('frame', 'pixel')})
        return (f"{opts.action} -- completed, output in {result['out']}", EXIT_OK)

    except TrifuseError as e:
        log.critical(f'!! {type(e).__name__}: {e}')
        return (f"Error: {e}", e.exit_code)
    except Exception as e:
        log.critical(f'!! Failed {e}, {type(e).__name__}')
        log.critical(f'Error on line {(sys.exc_info()[-1].tb_lineno)}')
        log.traceback(e)
        return (f"Error: {e}", EXIT_FAILURE)


def cli():
    '''Console entry point'''
    #Press Control C to exit the code anytime
    signal.signal(signal.SIGINT, signal_handler)
    msg, status = main(sys.argv[1:])
    log.info(f"{msg}  -- {status}")
    sys.exit(status)


if __name__ == "__main__":
    cli()
