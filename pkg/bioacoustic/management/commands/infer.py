import logging

from bioacoustic.audio_io import build_manifest, write_detections
from bioacoustic.exceptions import DataError
from bioacoustic.management.base import PipelineCommand
from bioacoustic.pipeline import detect_file, load_model, run_parallel

logger = logging.getLogger('bioacoustic.commands')


class Command(PipelineCommand):
    help = 'Few-shot detection: each file is supported by its first POS events and the rest is predicted'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('params', type=str, help='Parameter file written by train')
        parser.add_argument('data_dir', type=str, help='WAV files with same-stem annotation CSVs holding the supports')
        parser.add_argument('out_csv', type=str, help='Detection CSV to write')
        parser.add_argument('--finetune-sed', action='store_true', help='Fit a binary SED head with pseudo-label cycles')
        parser.add_argument('--finetune-sfbc', action='store_true', help='Fit the FBC head on a POS-center token')
        parser.add_argument('--cache', type=str, default=None, help='Feature cache written by featurize')

    def run(self, config, **options):
        model, params, _, config = load_model(options['params'], config)
        use_sed = options['finetune_sed'] or config.fewshot.finetune_sed
        use_sfbc = options['finetune_sfbc'] or config.fewshot.finetune_sfbc
        manifest = build_manifest(options['data_dir'], split='eval')

        def detect(entry):
            if entry.annotation_path is None:
                logger.warning('%s: no annotation CSV, no supports; skipped', entry.file_id)
                return []
            try:
                return detect_file(model, params, entry, config, options['cache'], use_sed, use_sfbc)
            except DataError as exc:
                logger.warning('%s: skipped (%s)', entry.file_id, exc)
                return []

        results = run_parallel(detect, manifest.entries, config.jobs)
        detections = [event for events in results for event in events]
        write_detections(detections, options['out_csv'])
        self.stdout.write(self.style.SUCCESS(
            f'{len(detections)} detection(s) in {len(manifest.entries)} file(s) written to {options["out_csv"]}'
        ))
