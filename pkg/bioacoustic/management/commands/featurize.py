from pathlib import Path

from bioacoustic.exceptions import DataError
from bioacoustic.management.base import PipelineCommand
from bioacoustic.pipeline import featurize_file, run_parallel


class Command(PipelineCommand):
    help = 'Extract log-mel or PCEN features for every WAV under a directory into a feature cache'

    def add_arguments(self, parser):
        super().add_arguments(parser)
        parser.add_argument('audio_dir', type=str, help='Directory searched recursively for *.wav')
        parser.add_argument('out_dir', type=str, help='Feature cache directory')

    def run(self, config, **options):
        audio_dir = Path(options['audio_dir'])
        if not audio_dir.is_dir():
            raise DataError(f'audio directory not found: {audio_dir}')
        paths = sorted(audio_dir.rglob('*.wav'))
        results = run_parallel(lambda p: featurize_file(p, config.features, options['out_dir']), paths, config.jobs)
        written = sum(1 for _, fresh in results if fresh)
        self.stdout.write(
            self.style.SUCCESS(f'{written} feature file(s) written, {len(results) - written} up to date')
        )
