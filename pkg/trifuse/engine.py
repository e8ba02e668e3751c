import os
import sys
from dataclasses import dataclass, replace
from typing import Any, Dict, List, Optional
from jsonpath_nz import log, jprint

from trifuse.action_process import ActionList, build_action_list, score_action_batch
from trifuse.config import PipelineConfig, load_config
from trifuse.core import ABNORMAL
from trifuse.evaluation import evaluate_results
from trifuse.fusion_process import ResultRecord, assemble_branch_scores, build_results, fuse_batch
from trifuse.ingest_process import (Dataset, Split, load_dataset, read_results, save_dataset, write_explanations,
                                    write_plot_data, write_results, write_roc)
from trifuse.motion_process import (MotionModels, fit_motion_branch, hmof_for_detections, load_autoencoder, load_gmm,
                                    save_autoencoder, save_gmm, score_motion_batch)
from trifuse.object_process import LabelList, build_label_list, score_object_batch
from trifuse.synthetic import generate_synthetic
from trifuse.util import DataError, TrifuseError, default_output_dir, save_dict_to_file

ACTIONS = ("gen", "train", "score", "eval", "run", "explain")

#Artifact names under the output directory
MODELS_DIR = "models"
LABEL_LIST_FILE = "label_list.txt"
ACTION_LIST_FILE = "action_list.txt"
AUTOENCODER_FILE = "autoencoder.tfae"
GMM_FILE = "gmm.tfgm"
RESULTS_FILE = "results.jsonl"
ROC_FRAME_FILE = "roc_frame.txt"
ROC_PIXEL_FILE = "roc_pixel.txt"
ROC_PLOT_FILE = "roc_plot.csv"
SUMMARY_FILE = "summary.json"
EXPLANATIONS_FILE = "explanations.jsonl"
DATASET_DIR = "dataset"


@dataclass
class TrainedModels:
    label_list: LabelList
    action_list: ActionList
    motion: MotionModels


def train_models(training: Split, config: PipelineConfig) -> TrainedModels:
    '''Build both whitelists and fit the autoencoder + GMM on training HMOF'''
    label_list = build_label_list(training.detections, config.alpha)
    action_list = build_action_list(training.segments, config.beta)
    features = [vec for _, vec in hmof_for_detections(training.detections, training.flows, config.hmof)]
    if not features:
        raise DataError("training split has no detections")
    motion = fit_motion_branch(features, config.ae, config.gmm, config.feature_mode,
                               config.ae_seed(), config.gmm_seed())
    return TrainedModels(label_list, action_list, motion)


def save_models(models: TrainedModels, directory: str):
    os.makedirs(directory, exist_ok=True)
    models.label_list.save(os.path.join(directory, LABEL_LIST_FILE))
    models.action_list.save(os.path.join(directory, ACTION_LIST_FILE))
    save_autoencoder(models.motion.autoencoder, os.path.join(directory, AUTOENCODER_FILE))
    save_gmm(models.motion.gmm, os.path.join(directory, GMM_FILE))


def load_models(directory: str, feature_mode: str) -> TrainedModels:
    return TrainedModels(
        LabelList.load(os.path.join(directory, LABEL_LIST_FILE)),
        ActionList.load(os.path.join(directory, ACTION_LIST_FILE)),
        MotionModels(load_autoencoder(os.path.join(directory, AUTOENCODER_FILE)),
                     load_gmm(os.path.join(directory, GMM_FILE)),
                     feature_mode),
    )


def score_split(testing: Split, models: TrainedModels, config: PipelineConfig) -> List[ResultRecord]:
    """
    Score every test target on each branch, fuse and explain

    Returns:
        result records sorted by frame then target id
    """
    detections = testing.detections
    if not detections:
        raise DataError("empty score list: testing split has no detections")
    obj_scores = score_object_batch(detections, models.label_list)
    if testing.segments:
        act_scores = score_action_batch(testing.segments, models.action_list)
    else:
        log.warning("testing split has no track segments; the action branch is absent for every target")
        act_scores = []
    features = hmof_for_detections(detections, testing.flows, config.hmof)
    mot_scores = score_motion_batch(features, models.motion.gmm, models.motion.autoencoder,
                                    models.motion.feature_mode)
    branch_scores = assemble_branch_scores(detections, obj_scores, act_scores, mot_scores, testing.segments)
    fused = fuse_batch(branch_scores, config.fusion)
    return build_results(detections, branch_scores, fused)


class ActionHandler:
    def __init__(self, config: PipelineConfig, opts: Dict[str, Any]):
        """
        Initialize action handler

        Args:
            config: resolved pipeline configuration
            opts: action name plus the data root, output directory and plot flag
        """
        self.config = config
        self.opts = opts
        self.out_dir = opts.get('out') or default_output_dir()
        self.data_root = opts.get('data')
        self._dataset: Optional[Dataset] = None
        self._models: Optional[TrainedModels] = None
        self._results: Optional[List[ResultRecord]] = None

    def _path(self, *parts: str) -> str:
        return os.path.join(self.out_dir, *parts)

    def _stage_failed(self, stage: str, e: Exception):
        log.error(f"{stage.capitalize()} action failed: {str(e)}")
        if isinstance(e, TrifuseError):
            e.with_stage(stage)
        else:
            log.traceback(e)

    def dataset(self) -> Dataset:
        '''Dataset from --data, or the configured synthetic scene when no data root is given'''
        if self._dataset is None:
            if self.data_root:
                dataset = load_dataset(self.data_root)
            else:
                log.info("No data root given, generating the configured synthetic scene")
                dataset = generate_synthetic(replace(self.config.scene, seed=self.config.scene_seed()), self.config.K)
            if dataset.K != self.config.K:
                raise DataError(f"dataset segments have K={dataset.K}, configuration expects K={self.config.K}")
            for segment in dataset.training.segments + dataset.testing.segments:
                segment.check_length(self.config.K)
            self._dataset = dataset
        return self._dataset

    def process_action(self) -> Dict[str, Any]:
        """
        Process the requested action

        Returns:
            Dict containing status and the action's result
        """
        action = str(self.opts.get('action', '')).lower()
        if not action:
            raise ValueError("Action is required")
        os.makedirs(self.out_dir, exist_ok=True)
        log.info(f"Action {action} -- started (output: {self.out_dir})")
        if action == 'gen':
            result = self._handle_gen()
        elif action == 'train':
            result = self._handle_train()
        elif action == 'score':
            result = self._handle_score()
        elif action == 'eval':
            result = self._handle_eval()
        elif action == 'run':
            self._handle_train()
            self._handle_score()
            result = self._handle_eval()
        elif action == 'explain':
            result = self._handle_explain()
        else:
            raise ValueError(f"Invalid action: {action}")
        log.info(f"Action {action} -- completed")
        return {'status': 'success', 'action': action, 'out': self.out_dir, 'result': result}

    def _handle_gen(self) -> Dict[str, Any]:
        """Handle gen action: write the configured synthetic scene as a dataset directory"""
        try:
            dataset = generate_synthetic(replace(self.config.scene, seed=self.config.scene_seed()), self.config.K)
            root = self.data_root or self._path(DATASET_DIR)
            save_dataset(dataset, root)
            return {'dataset': root,
                    'training_detections': len(dataset.training.detections),
                    'testing_detections': len(dataset.testing.detections)}
        except Exception as e:
            self._stage_failed('gen', e)
            raise

    def _handle_train(self) -> Dict[str, Any]:
        """Handle train action: label_list, action_list, autoencoder and GMM"""
        try:
            models = train_models(self.dataset().training, self.config)
            save_models(models, self._path(MODELS_DIR))
            self._models = models
            gmm = models.motion.gmm
            log.info(f"Trained models: {len(models.label_list)} labels, {len(models.action_list)} actions, "
                     f"GMM k={gmm.k} after {gmm.n_iter} EM iterations (converged={gmm.converged})")
            return {'labels': list(models.label_list), 'actions': list(models.action_list),
                    'em_iterations': gmm.n_iter, 'em_converged': gmm.converged}
        except Exception as e:
            self._stage_failed('train', e)
            raise

    def _handle_score(self) -> Dict[str, Any]:
        """Handle score action: per-branch and fused scores for every test target"""
        try:
            models = self._models or load_models(self._path(MODELS_DIR), self.config.feature_mode)
            results = score_split(self.dataset().testing, models, self.config)
            write_results(results, self._path(RESULTS_FILE))
            self._results = results
            abnormal = sum(r.fused.is_abnormal for r in results)
            log.info(f"Scored {len(results)} targets, {abnormal} abnormal")
            return {'targets': len(results), 'abnormal': abnormal}
        except Exception as e:
            self._stage_failed('score', e)
            raise

    def _handle_eval(self) -> Dict[str, Any]:
        """Handle eval action: ROC/AUC/EER at frame and pixel level, per branch and fused"""
        try:
            results = self._results if self._results is not None else read_results(self._path(RESULTS_FILE))
            summary, curves = evaluate_results(results, self.dataset().testing.masks,
                                               self.config.decision_threshold)
            summary['config'] = self.config.to_dict()
            summary['targets'] = len(results)
            write_roc(curves['frame/fused'], self._path(ROC_FRAME_FILE))
            write_roc(curves['pixel/fused'], self._path(ROC_PIXEL_FILE))
            if self.opts.get('plot'):
                write_plot_data(curves, self._path(ROC_PLOT_FILE))
            save_dict_to_file(summary, self._path(SUMMARY_FILE))
            return summary
        except Exception as e:
            self._stage_failed('eval', e)
            raise

    def _handle_explain(self) -> Dict[str, Any]:
        """Handle explain action: dump the explanation of every target, or of the abnormal ones only"""
        try:
            results = self._results if self._results is not None else read_results(self._path(RESULTS_FILE))
            rows = write_explanations(results, self._path(EXPLANATIONS_FILE), bool(self.opts.get('abnormal_only')))
            abnormal = [row for row in rows if row['decision'] == ABNORMAL]
            for row in abnormal:
                jprint(row)
            return {'targets': len(rows), 'abnormal': len(abnormal), 'explanations': self._path(EXPLANATIONS_FILE)}
        except Exception as e:
            self._stage_failed('explain', e)
            raise


def run_pipeline(config_path: Optional[str] = None, data_root: Optional[str] = None,
                 out_dir: Optional[str] = None, preset: Optional[str] = None,
                 seed: Optional[int] = None, plot: bool = False) -> Dict[str, Any]:
    '''
    Train, score and evaluate end to end; returns the evaluation summary
    '''
    config = load_config(config_path, preset, seed)
    handler = ActionHandler(config, {'action': 'run', 'data': data_root, 'out': out_dir, 'plot': plot})
    return handler.process_action()['result']


def runEngine(config: PipelineConfig, opts: Dict[str, Any]) -> Dict[str, Any]:
    '''
    Dispatch one CLI action and return its result
    '''
    try:
        handler = ActionHandler(config, opts)
        return handler.process_action()
    except TrifuseError as e:
        log.critical(f'!! {opts.get("action")} failed: {e}')
        raise
    except Exception as e:
        log.critical(f'!! Failed to process action {e}, {type(e).__name__}')
        log.critical(f'Error on line {(sys.exc_info()[-1].tb_lineno)}')
        log.traceback(e)
        raise
