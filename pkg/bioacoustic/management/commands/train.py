import logging
from pathlib import Path

import numpy as np

from bioacoustic.audio_io import build_manifest, build_weak_manifest
from bioacoustic.management.base import PipelineCommand
from bioacoustic.model import MultiTaskModel
from bioacoustic.pipeline import (
    load_corpus,
    pseudo_label_files,
    save_model,
    sidecar,
    train_loop,
    write_pseudo_labels,
)

logger = logging.getLogger('bioacoustic.commands')


class Command(PipelineCommand):
    help = 'Episodic training of the multi-task detector on an annotated directory'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('data_dir', type=str, help='Training WAV files with same-stem annotation CSVs')
        parser.add_argument('out', type=str, help='Output parameter file')
        parser.add_argument('--weak', type=str, default=None,
                            help='Weakly labelled WAVs (class = parent directory) for a pseudo-label stage')
        parser.add_argument('--cache', type=str, default=None, help='Feature cache written by featurize')

    def run(self, config, **options):
        out = Path(options['out'])
        cache = options['cache']
        corpus = load_corpus(build_manifest(options['data_dir'], split='train'), config, cache)
        logger.info('training on %d file(s), classes: %s', len(corpus.files), ', '.join(corpus.class_names))
        model = MultiTaskModel.from_config(config, len(corpus.class_names))
        params = model.build_params(config.seed, np.dtype(config.model.dtype))

        def checkpoint(episode_no):
            save_model(params, config, corpus.class_names, out)
            logger.info('checkpoint after episode %d written to %s', episode_no, out)

        loss_path = sidecar(out, '.loss.csv')
        loss_path.parent.mkdir(parents=True, exist_ok=True)
        with loss_path.open('w', encoding='utf-8') as loss_log:
            loss_log.write('episode,l1,l2,total\n')
            optimizer, trace = train_loop(model, params, corpus, config, config.train.n_episodes,
                                          loss_log=loss_log, checkpoint=checkpoint)
            if options['weak']:
                events, files = pseudo_label_files(model, params, corpus, build_weak_manifest(options['weak']),
                                                   config, cache)
                write_pseudo_labels(events, sidecar(out, '.pseudo.csv'))
                logger.info('%d pseudo event(s) in %d weak file(s)', len(events), len(files))
                if files:
                    corpus = corpus.extended(files)
                    _, more = train_loop(model, params, corpus, config, config.train.pseudo_episodes,
                                         start=len(trace), optimizer=optimizer, loss_log=loss_log,
                                         checkpoint=checkpoint)
                    trace += more

        save_model(params, config, corpus.class_names, out)
        final = f', final loss {trace[-1].total:.4f}' if trace else ''
        self.stdout.write(self.style.SUCCESS(f'{len(trace)} episode(s) trained{final}; parameters in {out}'))
